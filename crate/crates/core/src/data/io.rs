//! On-disk layout of a prepared dataset directory:
//!
//! ```text
//! manifest.txt       key=value: domains, users, items, train_records, test_records
//! train.tsv          user item domain timestamp [rating]   (dense ids)
//! test.tsv           same columns, one held-out record per (user, domain)
//! domain_items.tsv   domain item
//! users.tsv          original_id dense_id
//! items.tsv          original_id dense_id
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::parse::{parse_interactions, InputFormat};
use super::{Dataset, IdMaps, InteractionRecord, SplitDataset};
use crate::error::{Error, Result};

/// Paths of the files in a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub dir: PathBuf,
}

impl DatasetFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DatasetFiles { dir: dir.into() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.txt")
    }
    pub fn train(&self) -> PathBuf {
        self.dir.join("train.tsv")
    }
    pub fn test(&self) -> PathBuf {
        self.dir.join("test.tsv")
    }
    pub fn domain_items(&self) -> PathBuf {
        self.dir.join("domain_items.tsv")
    }
    pub fn users(&self) -> PathBuf {
        self.dir.join("users.tsv")
    }
    pub fn items(&self) -> PathBuf {
        self.dir.join("items.tsv")
    }
}

pub fn write_dataset_dir(dir: &Path, split: &SplitDataset, maps: &IdMaps) -> Result<DatasetFiles> {
    fs::create_dir_all(dir)?;
    let files = DatasetFiles::new(dir);
    let train = &split.train;
    let manifest = format!(
        "domains={}\nusers={}\nitems={}\ntrain_records={}\ntest_records={}\n",
        train.domains,
        train.user_count,
        train.item_count,
        train.records.len(),
        split.test.len()
    );
    write_file(&files.manifest(), manifest.as_bytes())?;
    write_records(&files.train(), &train.records)?;
    write_records(&files.test(), &split.test)?;
    let mut buf = String::from("# domain\titem\n");
    for (m, items) in train.per_domain_items.iter().enumerate() {
        for i in items {
            buf.push_str(&format!("{m}\t{i}\n"));
        }
    }
    write_file(&files.domain_items(), buf.as_bytes())?;
    write_mapping(&files.users(), &maps.users)?;
    write_mapping(&files.items(), &maps.items)?;
    Ok(files)
}

pub fn read_dataset_dir(dir: &Path) -> Result<SplitDataset> {
    let files = DatasetFiles::new(dir);
    let manifest = fs::read_to_string(files.manifest())
        .map_err(|e| Error::from(e).in_file(files.manifest()))?;
    let get = |key: &str| -> Result<usize> {
        manifest
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
            .ok_or_else(|| Error::Data(format!("manifest missing `{key}`")))?
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("manifest `{key}` is not a count")))
    };
    let (domains, users, items) = (get("domains")?, get("users")?, get("items")?);
    let train = read_records(&files.train())?;
    let test = read_records(&files.test())?;

    let mut per_domain_items = vec![Vec::new(); domains];
    let path = files.domain_items();
    let reader = BufReader::new(fs::File::open(&path).map_err(|e| Error::from(e).in_file(&path))?);
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .split_once('\t')
            .and_then(|(m, i)| Some((m.parse::<usize>().ok()?, i.parse::<usize>().ok()?)));
        match parsed {
            Some((m, i)) if m < domains && i < items => per_domain_items[m].push(i),
            _ => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("bad domain item line `{line}`"),
                }
                .in_file(&path))
            }
        }
    }
    for v in &mut per_domain_items {
        v.sort_unstable();
        v.dedup();
    }
    let train = Dataset {
        records: train,
        domains,
        user_count: users,
        item_count: items,
        per_domain_items,
    };
    train.validate().map_err(|e| e.in_file(files.train()))?;
    Ok(SplitDataset { train, test })
}

fn read_records(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    let raw = parse_interactions(BufReader::new(file), InputFormat::Native, 0)
        .map_err(|e| e.in_file(path))?;
    raw.into_iter()
        .map(|r| {
            let user = r
                .user
                .parse()
                .map_err(|_| Error::Data(format!("non-dense user id `{}`", r.user)));
            let item = r
                .item
                .parse()
                .map_err(|_| Error::Data(format!("non-dense item id `{}`", r.item)));
            Ok(InteractionRecord {
                user: user?,
                item: item?,
                domain: r.domain,
                timestamp: r.timestamp,
                rating: r.rating,
            })
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_file(path))
}

fn write_records(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let mut buf = String::from("# user\titem\tdomain\ttimestamp\n");
    for r in records {
        match r.rating {
            Some(x) => buf.push_str(&format!(
                "{}\t{}\t{}\t{}\t{x}\n",
                r.user, r.item, r.domain, r.timestamp
            )),
            None => buf.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.user, r.item, r.domain, r.timestamp
            )),
        }
    }
    write_file(path, buf.as_bytes())
}

/// Write an `original_id dense_id` sidecar.
pub fn write_mapping(path: &Path, originals: &[String]) -> Result<()> {
    let mut buf = String::new();
    for (dense, original) in originals.iter().enumerate() {
        buf.push_str(&format!("{original}\t{dense}\n"));
    }
    write_file(path, buf.as_bytes())
}

/// Read an `original_id dense_id` sidecar back into dense order.
pub fn read_mapping(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let Some((orig, dense)) = line.rsplit_once('\t') else {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "expected `original_id<TAB>dense_id`".into(),
            }
            .in_file(path));
        };
        let dense: usize = dense.parse().map_err(|_| {
            Error::Parse {
                line: idx + 1,
                msg: format!("bad dense id `{dense}`"),
            }
            .in_file(path)
        })?;
        pairs.push((dense, orig.to_string()));
    }
    pairs.sort();
    if pairs.iter().enumerate().any(|(i, (d, _))| *d != i) {
        return Err(Error::Data("mapping ids are not a dense 0-based range".into()).in_file(path));
    }
    Ok(pairs.into_iter().map(|(_, o)| o).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    f.write_all(bytes).map_err(|e| Error::from(e).in_file(path))
}
