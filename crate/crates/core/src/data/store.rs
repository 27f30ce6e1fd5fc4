//! Split directory layout: five plain-text files, stable order, no surprises.
//!
//! ```text
//! catalog.tsv   item_id <TAB> title                       (ascending item_id)
//! train.tsv     user_id <TAB> target_ts <TAB> context <TAB> positive <TAB> negatives <TAB> candidates
//! val.tsv       same columns
//! test.tsv      same columns
//! pop.tsv       item_id <TAB> train-split count           (ascending item_id)
//! ```
//!
//! `context`, `negatives`, and `candidates` are comma-joined item ids;
//! context order is chronological, candidate order ascending. Loading
//! re-validates every reference against the catalog, so a split directory is
//! self-contained and safe to hand-edit.

use super::ingest::parse_items;
use super::{Catalog, DataError, DataResult, DatasetSplit, ItemId, TrainingInstance};
use std::fmt::Write as _;
use std::path::Path;

const PART_FILES: [&str; 3] = ["train.tsv", "val.tsv", "test.tsv"];

pub fn save_split(split: &DatasetSplit, dir: &Path) -> DataResult<()> {
    let io = |source| DataError::Io { path: dir.display().to_string(), source };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut catalog = String::new();
    for item in split.catalog.iter() {
        writeln!(catalog, "{}\t{}", item.id, item.title).unwrap();
    }
    write_atomic(&dir.join("catalog.tsv"), &catalog)?;
    for (name, part) in PART_FILES.iter().zip([&split.train, &split.validation, &split.test]) {
        let mut body = String::new();
        for inst in part.iter() {
            writeln!(
                body,
                "{}\t{}\t{}\t{}\t{}\t{}",
                inst.user_id,
                inst.target_timestamp,
                join_ids(&inst.prompt_context),
                inst.positive,
                join_ids(&inst.sampled_negatives),
                join_ids(&inst.candidates),
            )
            .unwrap();
        }
        write_atomic(&dir.join(name), &body)?;
    }
    let mut pop = String::new();
    for (idx, count) in split.pop_counts.iter().enumerate() {
        writeln!(pop, "{}\t{}", split.catalog.id_at(idx), count).unwrap();
    }
    write_atomic(&dir.join("pop.tsv"), &pop)?;
    Ok(())
}

pub fn load_split(dir: &Path) -> DataResult<DatasetSplit> {
    let catalog = parse_items(&dir.join("catalog.tsv"))?;
    let mut parts: Vec<Vec<TrainingInstance>> = Vec::with_capacity(3);
    for name in PART_FILES {
        parts.push(load_part(&dir.join(name), &catalog)?);
    }
    let test = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let pop_counts = load_pop(&dir.join("pop.tsv"), &catalog)?;
    Ok(DatasetSplit { catalog, train, validation, test, pop_counts })
}

fn join_ids(ids: &[ItemId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn write_atomic(path: &Path, content: &str) -> DataResult<()> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tsv.tmp");
    std::fs::write(&tmp, content).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

fn load_part(path: &Path, catalog: &Catalog) -> DataResult<Vec<TrainingInstance>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 6 {
            return Err(DataError::Parse {
                path: p,
                line,
                msg: format!("expected 6 columns, found {}", cols.len()),
            });
        }
        let parse_u32 = |s: &str, what: &str| -> DataResult<u32> {
            s.trim().parse().map_err(|_| DataError::Parse {
                path: p.clone(),
                line,
                msg: format!("{what} `{s}` is not a non-negative integer"),
            })
        };
        let user_id = parse_u32(cols[0], "user_id")?;
        let target_timestamp: i64 = cols[1].trim().parse().map_err(|_| DataError::Parse {
            path: p.clone(),
            line,
            msg: format!("target_ts `{}` is not an integer", cols[1]),
        })?;
        let parse_list = |s: &str, what: &str| -> DataResult<Vec<ItemId>> {
            s.split(',')
                .map(|tok| {
                    let id = parse_u32(tok, what)?;
                    if !catalog.contains(id) {
                        return Err(DataError::UnknownItem {
                            path: p.clone(),
                            line,
                            token: tok.to_string(),
                        });
                    }
                    Ok(id)
                })
                .collect()
        };
        let prompt_context = parse_list(cols[2], "context item")?;
        let positive = parse_u32(cols[3], "positive")?;
        if !catalog.contains(positive) {
            return Err(DataError::UnknownItem { path: p.clone(), line, token: cols[3].to_string() });
        }
        let sampled_negatives = parse_list(cols[4], "negative")?;
        let candidates = parse_list(cols[5], "candidate")?;
        if prompt_context.is_empty() {
            return Err(DataError::Parse { path: p.clone(), line, msg: "empty context".into() });
        }
        if !candidates.contains(&positive) {
            return Err(DataError::Parse {
                path: p.clone(),
                line,
                msg: "candidate set does not contain the positive".into(),
            });
        }
        out.push(TrainingInstance {
            user_id,
            prompt_context,
            positive,
            target_timestamp,
            candidates,
            sampled_negatives,
        });
    }
    Ok(out)
}

fn load_pop(path: &Path, catalog: &Catalog) -> DataResult<Vec<u64>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: p.clone(), source })?;
    let mut counts = vec![0u64; catalog.len()];
    let mut seen = vec![false; catalog.len()];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id_str, count_str) = raw.split_once('\t').ok_or_else(|| DataError::Parse {
            path: p.clone(),
            line,
            msg: "expected `item_id<TAB>count`".into(),
        })?;
        let id: ItemId = id_str.trim().parse().map_err(|_| DataError::Parse {
            path: p.clone(),
            line,
            msg: format!("item_id `{id_str}` is not a non-negative integer"),
        })?;
        let idx = catalog.idx_of(id).map_err(|_| DataError::UnknownItem {
            path: p.clone(),
            line,
            token: id_str.to_string(),
        })?;
        counts[idx] = count_str.trim().parse().map_err(|_| DataError::Parse {
            path: p.clone(),
            line,
            msg: format!("count `{count_str}` is not a non-negative integer"),
        })?;
        seen[idx] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DataError::Parse {
            path: p,
            line: 0,
            msg: format!("pop.tsv has no row for item_id {}", catalog.id_at(missing)),
        });
    }
    Ok(counts)
}
