//! Text dump of a graph for debugging.
//!
//! Edge file: header comments `# domains=T users=U items=I` and one
//! `# domain_items m i,i,...` line per domain, then `domain user item timestamp`
//! rows. Hyperedge file: `kind owner node,node,...` with kinds `u` / `i`,
//! owners `u` or `item:target`, and nodes `u<user>@<domain>` or `i<item>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{HyperedgeOwner, MultiDomainGraph, NodeId};
use crate::data::{Dataset, InteractionRecord};
use crate::error::{Error, Result};

pub fn write_graph_dump(graph: &MultiDomainGraph) -> (String, String) {
    let mut edges = format!(
        "# domains={} users={} items={}\n",
        graph.domains(),
        graph.user_count(),
        graph.item_count()
    );
    for m in 0..graph.domains() {
        let items: Vec<String> = graph.domain_items(m).iter().map(usize::to_string).collect();
        let _ = writeln!(edges, "# domain_items {m} {}", items.join(","));
    }
    for (m, u, i, ts) in graph.edges() {
        let _ = writeln!(edges, "{m}\t{u}\t{i}\t{ts}");
    }
    let mut hyper = String::new();
    for e in graph
        .hyperedges_u()
        .iter()
        .chain(graph.hyperedges_i().values())
    {
        let (kind, owner) = match e.owner {
            HyperedgeOwner::User(u) => ("u", u.to_string()),
            HyperedgeOwner::ItemTarget { item, target } => ("i", format!("{item}:{target}")),
        };
        let nodes: Vec<String> = e.nodes.iter().map(|n| format_node(*n)).collect();
        let _ = writeln!(hyper, "{kind}\t{owner}\t{}", nodes.join(","));
    }
    (edges, hyper)
}

fn format_node(n: NodeId) -> String {
    match n {
        NodeId::User { user, domain } => format!("u{user}@{domain}"),
        NodeId::Item(i) => format!("i{i}"),
    }
}

pub fn read_graph_dump(edges: &str, hyperedges: &str) -> Result<MultiDomainGraph> {
    let perr = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut header: Option<(usize, usize, usize)> = None;
    let mut per_domain = Vec::new();
    let mut records = Vec::new();
    for (idx, line) in edges.lines().enumerate() {
        let ln = idx + 1;
        if let Some(rest) = line.strip_prefix("# domain_items ") {
            let (m, list) = rest.split_once(' ').unwrap_or((rest, ""));
            let m: usize = m.parse().map_err(|_| perr(ln, "bad domain index"))?;
            let items = list
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| perr(ln, "bad item id")))
                .collect::<Result<Vec<usize>>>()?;
            if per_domain.len() <= m {
                per_domain.resize(m + 1, Vec::new());
            }
            per_domain[m] = items;
        } else if let Some(rest) = line.strip_prefix("# ") {
            let mut vals = BTreeMap::new();
            for kv in rest.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    vals.insert(
                        k,
                        v.parse::<usize>()
                            .map_err(|_| perr(ln, "bad header value"))?,
                    );
                }
            }
            match (vals.get("domains"), vals.get("users"), vals.get("items")) {
                (Some(&t), Some(&u), Some(&i)) => header = Some((t, u, i)),
                _ => return Err(perr(ln, "header needs domains, users, items")),
            }
        } else if !line.trim().is_empty() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(perr(ln, "expected `domain user item timestamp`"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| perr(ln, "non-numeric field"));
            records.push(InteractionRecord {
                domain: num(f[0])? as usize,
                user: num(f[1])? as usize,
                item: num(f[2])? as usize,
                timestamp: num(f[3])?,
                rating: None,
            });
        }
    }
    let (t, users, items) = header.ok_or_else(|| perr(1, "missing header"))?;
    let mut ds = Dataset::from_records(records, t, users, items)?;
    if per_domain.len() == t {
        ds.per_domain_items = per_domain;
    }
    let mut graph = MultiDomainGraph::build(&ds);

    let mut hyper_u = Vec::new();
    let mut hyper_i = BTreeMap::new();
    for (idx, line) in hyperedges.lines().enumerate() {
        let ln = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(perr(ln, "expected `kind owner nodes`"));
        }
        let nodes = f[2]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| parse_node(s).ok_or_else(|| perr(ln, "bad node")))
            .collect::<Result<Vec<_>>>()?;
        match f[0] {
            "u" => hyper_u.push(
                f[1].parse::<usize>()
                    .map_err(|_| perr(ln, "bad user owner"))?,
            ),
            "i" => {
                let (item, target) = f[1]
                    .split_once(':')
                    .ok_or_else(|| perr(ln, "bad item owner"))?;
                let key = (
                    item.parse().map_err(|_| perr(ln, "bad item owner"))?,
                    target.parse().map_err(|_| perr(ln, "bad item owner"))?,
                );
                let similar = nodes[1..]
                    .iter()
                    .map(|n| match n {
                        NodeId::Item(i) => Ok(*i),
                        NodeId::User { .. } => Err(perr(ln, "user node in item hyperedge")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                hyper_i.insert(key, similar);
            }
            _ => return Err(perr(ln, "unknown hyperedge kind")),
        }
    }
    if !hyper_u.is_empty() {
        graph.build_hyperedges_u();
    }
    graph.set_hyperedges_i(hyper_i);
    Ok(graph)
}

fn parse_node(s: &str) -> Option<NodeId> {
    if let Some(rest) = s.strip_prefix('u') {
        let (u, m) = rest.split_once('@')?;
        Some(NodeId::User {
            user: u.parse().ok()?,
            domain: m.parse().ok()?,
        })
    } else {
        s.strip_prefix('i')?.parse().ok().map(NodeId::Item)
    }
}
