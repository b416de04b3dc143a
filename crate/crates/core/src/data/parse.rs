use std::io::BufRead;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A parsed interaction with its original string ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub domain: usize,
    pub timestamp: u64,
    pub rating: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// Tab-separated `user item domain timestamp [rating]`; `#` starts a comment line.
    Native,
    /// Comma-separated `item,user,rating,timestamp`, one file per domain.
    AmazonRatings,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(InputFormat::Native),
            "amazon_ratings" | "amazon" => Ok(InputFormat::AmazonRatings),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

/// Parse line-oriented interaction text. For [`InputFormat::AmazonRatings`]
/// every record gets `domain`; the native format carries its own domain
/// column and ignores it. Blank lines are skipped.
pub fn parse_interactions<R: BufRead>(
    source: R,
    format: InputFormat,
    domain: usize,
) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let record = match format {
            InputFormat::Native => {
                if trimmed.starts_with('#') {
                    continue;
                }
                parse_native(trimmed, line_no)?
            }
            InputFormat::AmazonRatings => parse_amazon(trimmed, line_no, domain)?,
        };
        out.push(record);
    }
    Ok(out)
}

fn parse_native(line: &str, line_no: usize) -> Result<RawRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if !(4..=5).contains(&fields.len()) {
        return Err(Error::Parse {
            line: line_no,
            msg: format!(
                "expected 4 or 5 tab-separated fields, found {}",
                fields.len()
            ),
        });
    }
    let domain = fields[2].trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("bad domain `{}`", fields[2]),
    })?;
    let timestamp = parse_timestamp(fields[3], line_no)?;
    let rating = fields
        .get(4)
        .map(|r| parse_rating(r, line_no))
        .transpose()?;
    Ok(RawRecord {
        user: fields[0].to_string(),
        item: fields[1].to_string(),
        domain,
        timestamp,
        rating,
    })
}

fn parse_amazon(line: &str, line_no: usize, domain: usize) -> Result<RawRecord> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 4 comma-separated fields, found {}", fields.len()),
        });
    }
    let rating = parse_rating(fields[2], line_no)?;
    let timestamp = parse_timestamp(fields[3], line_no)?;
    Ok(RawRecord {
        user: fields[1].to_string(),
        item: fields[0].to_string(),
        domain,
        timestamp,
        rating: Some(rating),
    })
}

fn parse_timestamp(field: &str, line_no: usize) -> Result<u64> {
    field.trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("bad timestamp `{field}`"),
    })
}

// Ratings arrive as "4" or "4.0".
fn parse_rating(field: &str, line_no: usize) -> Result<u8> {
    let bad = || Error::Parse {
        line: line_no,
        msg: format!("bad rating `{field}`"),
    };
    let value: f64 = field.trim().parse().map_err(|_| bad())?;
    if !(0.0..=255.0).contains(&value) || value.fract() != 0.0 {
        return Err(bad());
    }
    Ok(value as u8)
}
