//! The hierarchical hypergraph recommender.
//!
//! Per message-passing layer `l`:
//!
//! 1. **Hyper-I** (item transfer): items outside the target domain are
//!    refined by attention over themselves and their similar target-domain
//!    items, optionally biased by shortest-path distances;
//! 2. **aggregation + update**: every node takes the mean of (sampled)
//!    neighbor rows and applies `h W_self + h_N W_nb`;
//! 3. **Hyper-U** (user aggregation): the `T` per-domain rows of each user
//!    are refined jointly, by attention or by a mean combine.
//!
//! The last layer's rows are the final representations and scores are
//! their inner products.

mod config;
mod forward;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numeric::{ParamId, ParamStore, Tensor2};

pub use config::{AblationVariant, ModelConfig, LEAKY_SLOPE};
pub use forward::{Fanout, ForwardContext, ForwardOutput, Phase};
pub use layers::{
    gather_initial, hyper_i_refine, hyper_u_refine, message_pass_layer, predict, readout,
    score_rows, AttentionIds, HyperUVars, HyperUWeights, LayerWeights, Refinement, UpdateRows,
};

/// Parameter handles of one model.
#[derive(Debug, Clone)]
pub struct ParamIds {
    /// `(|U| + |I|) x d`: one row per user id, then one per item.
    pub embedding: ParamId,
    pub layers: Vec<LayerWeights>,
    pub hyper_u: Vec<Option<HyperUWeights>>,
    pub hyper_i: Vec<Option<AttentionIds>>,
    /// `heads x (d_max + 2)` distance-bias table shared by all layers.
    pub phi: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct H3Model {
    pub config: ModelConfig,
    pub user_count: usize,
    pub item_count: usize,
    pub params: ParamStore,
    pub ids: ParamIds,
}

impl H3Model {
    /// Fresh parameters, uniform in `±1/sqrt(fan_in)`; the distance-bias
    /// table starts at zero.
    pub fn new(
        config: ModelConfig,
        user_count: usize,
        item_count: usize,
        seed: u64,
    ) -> crate::Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
        let mut store = ParamStore::new();
        let d0 = config.embed_dim();
        let embedding = store.add_uniform("embedding", user_count + item_count, d0, d0, &mut rng);
        let variant = config.variant;
        let mut layers = Vec::new();
        let mut hyper_u = Vec::new();
        let mut hyper_i = Vec::new();
        for l in 1..=config.layers() {
            let (din, dout) = (config.in_dim(l), config.out_dim(l));
            let mut lin = |name: &str, rows: usize, cols: usize, store: &mut ParamStore| {
                store.add_uniform(format!("layer{l}.{name}"), rows, cols, rows, &mut rng)
            };
            layers.push(LayerWeights {
                user_self: lin("user_self", din, dout, &mut store),
                user_nb: lin("user_nb", din, dout, &mut store),
                item_self: lin("item_self", din, dout, &mut store),
                item_nb: lin("item_nb", din, dout, &mut store),
            });
            hyper_i.push(
                variant
                    .hyper_i()
                    .map(|_| AttentionIds::new(&mut store, &format!("hyper_i{l}"), din, &mut rng)),
            );
            hyper_u.push(if variant.hyper_u_attention() {
                Some(HyperUWeights::Attention(AttentionIds::new(
                    &mut store,
                    &format!("hyper_u{l}"),
                    dout,
                    &mut rng,
                )))
            } else if variant.has_hyper_u() {
                Some(HyperUWeights::Combine(store.add_uniform(
                    format!("hyper_u{l}.combine"),
                    dout,
                    dout,
                    dout,
                    &mut rng,
                )))
            } else {
                None
            });
        }
        let phi = variant.distance_bias().then(|| {
            store.add(
                "phi",
                Tensor2::zeros(config.heads, config.d_max as usize + 2),
            )
        });
        Ok(H3Model {
            config,
            user_count,
            item_count,
            params: store,
            ids: ParamIds {
                embedding,
                layers,
                hyper_u,
                hyper_i,
                phi,
            },
        })
    }

    /// Embedding-table row of a user id.
    pub fn user_row(&self, user: usize) -> usize {
        user
    }

    /// Embedding-table row of an item id.
    pub fn item_row(&self, item: usize) -> usize {
        self.user_count + item
    }

    /// Layer-0 item representations (`item_count x d`), rows indexed by item id.
    pub fn item_embeddings(&self) -> Tensor2 {
        let x = self.params.get(self.ids.embedding);
        let d = x.cols();
        let data = x.data()[self.user_count * d..].to_vec();
        Tensor2::from_vec(self.item_count, d, data).expect("shape")
    }
}
