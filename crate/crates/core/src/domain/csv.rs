use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use super::{OutcomeKind, SiteDataset};
use crate::error::{Error, Result};

struct Block {
    site_id: String,
    rows: Vec<f64>,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        line,
        message: message.into(),
    }
}

/// Reads `site_id,a,y,x1,...,xp` rows and groups them by site, keeping the
/// order in which sites first appear.
pub fn read_sites_csv<R: Read>(reader: R, kind: OutcomeKind) -> Result<Vec<SiteDataset>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 3 || names[0] != "site_id" || names[1] != "a" || names[2] != "y" {
        return Err(parse_err(1, "header must start with site_id,a,y"));
    }
    for (j, name) in names[3..].iter().enumerate() {
        if *name != format!("x{}", j + 1) {
            return Err(parse_err(1, format!("expected column x{} but found {name}", j + 1)));
        }
    }
    let p = names.len() - 3;

    let mut blocks: Vec<Block> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != p + 3 {
            return Err(parse_err(line, format!("expected {} fields, found {}", p + 3, rec.len())));
        }
        let site = rec[0].to_string();
        if site.is_empty() {
            return Err(parse_err(line, "empty site_id"));
        }
        let a: u8 = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(line, format!("treatment must be 0 or 1, found {other:?}"))),
        };
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("column {} is not a number: {:?}", names[j], &rec[j])))
        };
        let y = num(2)?;
        let pos = match blocks.iter().position(|b| b.site_id == site) {
            Some(pos) => pos,
            None => {
                blocks.push(Block {
                    site_id: site,
                    rows: Vec::new(),
                    treatment: Vec::new(),
                    outcome: Vec::new(),
                });
                blocks.len() - 1
            }
        };
        let b = &mut blocks[pos];
        for j in 0..p {
            b.rows.push(num(j + 3)?);
        }
        b.treatment.push(a);
        b.outcome.push(y);
    }
    blocks
        .into_iter()
        .map(|b| {
            let n = b.treatment.len();
            SiteDataset::new(b.site_id, DMatrix::from_row_slice(n, p, &b.rows), b.treatment, b.outcome, kind)
        })
        .collect()
}

pub fn load_sites_csv(path: impl AsRef<Path>, kind: OutcomeKind) -> Result<Vec<SiteDataset>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_sites_csv(file, kind)
}
