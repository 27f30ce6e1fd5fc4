//! Plain-text ingestion: an interactions file and an items file in.
//!
//! Items file: one `item_id<TAB>title` row per item, integer ids, titles may
//! contain anything but a tab. Interactions file: `user<TAB>item<TAB>timestamp`
//! rows; user keys are arbitrary strings (assigned dense integer ids in order
//! of first appearance), the item column must match a cataloged id, and the
//! timestamp must parse as a signed integer. Rows are grouped per user and
//! sorted chronologically (stable, so equal timestamps keep file order).

use super::{
    build_split, BuildOptions, Catalog, DataError, DataResult, DatasetSplit, InteractionSequence,
    Item, ItemId,
};
use std::collections::HashMap;
use std::path::Path;

/// Ingestion result: the split plus how many users were dropped for having
/// fewer than `min_interactions` rows.
#[derive(Debug)]
pub struct IngestOutcome {
    pub split: DatasetSplit,
    pub dropped_users: usize,
}

pub fn ingest(
    interactions_path: &Path,
    items_path: &Path,
    opts: &BuildOptions,
) -> DataResult<IngestOutcome> {
    let catalog = parse_items(items_path)?;
    let sequences = parse_interactions(interactions_path, &catalog)?;
    let (kept, dropped_users): (Vec<_>, Vec<_>) =
        sequences.into_iter().partition(|s| s.items.len() >= opts.min_interactions);
    if kept.is_empty() {
        return Err(DataError::Empty(format!(
            "every user has fewer than {} interactions",
            opts.min_interactions
        )));
    }
    let split = build_split(&kept, catalog, opts)?;
    Ok(IngestOutcome { split, dropped_users: dropped_users.len() })
}

fn read_lines(path: &Path) -> DataResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(text.lines().map(str::to_string).collect())
}

pub(super) fn parse_items(path: &Path) -> DataResult<Catalog> {
    let p = path.display().to_string();
    let mut items = Vec::new();
    let mut seen: HashMap<ItemId, usize> = HashMap::new();
    for (i, raw) in read_lines(path)?.iter().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id_str, title) = raw.split_once('\t').ok_or_else(|| DataError::Parse {
            path: p.clone(),
            line,
            msg: "expected `item_id<TAB>title`".into(),
        })?;
        let id: ItemId = id_str.trim().parse().map_err(|_| DataError::Parse {
            path: p.clone(),
            line,
            msg: format!("item_id `{id_str}` is not a non-negative integer"),
        })?;
        if seen.insert(id, line).is_some() {
            return Err(DataError::DuplicateItem { path: p, line, id });
        }
        items.push(Item { id, title: title.trim().to_string() });
    }
    if items.is_empty() {
        return Err(DataError::Empty(format!("{p}: no items")));
    }
    Catalog::new(items)
}

fn parse_interactions(path: &Path, catalog: &Catalog) -> DataResult<Vec<InteractionSequence>> {
    let p = path.display().to_string();
    // Interactions address items as strings matched against the decimal form
    // of cataloged ids, so an unknown token is a reference error (naming the
    // token), not a parse error.
    let by_token: HashMap<String, ItemId> =
        catalog.iter().map(|i| (i.id.to_string(), i.id)).collect();
    let mut user_ids: HashMap<String, u32> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<u32, Vec<(i64, usize, ItemId)>> = HashMap::new();
    for (i, raw) in read_lines(path)?.iter().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 {
            return Err(DataError::Parse {
                path: p,
                line,
                msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let item = *by_token.get(cols[1].trim()).ok_or_else(|| DataError::UnknownItem {
            path: p.clone(),
            line,
            token: cols[1].trim().to_string(),
        })?;
        let ts: i64 = cols[2].trim().parse().map_err(|_| DataError::Parse {
            path: p.clone(),
            line,
            msg: format!("timestamp `{}` is not an integer", cols[2]),
        })?;
        let key = cols[0].trim();
        let next_id = user_ids.len() as u32;
        let uid = *user_ids.entry(key.to_string()).or_insert_with(|| {
            order.push(key.to_string());
            next_id
        });
        rows.entry(uid).or_default().push((ts, line, item));
    }
    let mut sequences = Vec::with_capacity(order.len());
    for (uid, _) in order.iter().enumerate() {
        let uid = uid as u32;
        let mut r = rows.remove(&uid).unwrap_or_default();
        r.sort_by_key(|&(ts, line, _)| (ts, line));
        sequences.push(InteractionSequence {
            user_id: uid,
            items: r.iter().map(|&(_, _, it)| it).collect(),
            timestamps: r.iter().map(|&(ts, _, _)| ts).collect(),
        });
    }
    Ok(sequences)
}

#[cfg(test)]
mod tests {
    use super::super::{pop_counts_of, BuildOptions};
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn items_tsv(n: usize) -> String {
        (0..n).map(|i| format!("{i}\titem {i}\n")).collect()
    }

    /// 10 users x 10 interactions each; user u's target timestamp is u, so the
    /// chronological split is by user index.
    fn toy_corpus(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let items = write_file(dir, "items.tsv", &items_tsv(40));
        let mut s = String::new();
        for u in 0..10 {
            for t in 0..10 {
                let item = (u * 3 + t) % 40;
                // Final interaction dominates the sort: timestamp 1000+u.
                let ts = if t == 9 { 1000 + u } else { t };
                s.push_str(&format!("user{u}\t{item}\t{ts}\n"));
            }
        }
        let inter = write_file(dir, "inter.tsv", &s);
        (inter, items)
    }

    fn small_opts() -> BuildOptions {
        BuildOptions { n_neg: 3, candidate_size: 5, seed: 11, ..Default::default() }
    }

    #[test]
    fn ten_users_split_eight_one_one() {
        let dir = tempfile::tempdir().unwrap();
        let (inter, items) = toy_corpus(dir.path());
        let out = ingest(&inter, &items, &small_opts()).unwrap();
        assert_eq!(out.split.train.len(), 8);
        assert_eq!(out.split.validation.len(), 1);
        assert_eq!(out.split.test.len(), 1);
        assert_eq!(out.dropped_users, 0);
        // Chronology: train targets precede validation precede test.
        let max_train = out.split.train.iter().map(|i| i.target_timestamp).max().unwrap();
        let val = out.split.validation[0].target_timestamp;
        let test = out.split.test[0].target_timestamp;
        assert!(max_train <= val && val <= test);
    }

    #[test]
    fn instance_shape_matches_prefix_and_options() {
        let dir = tempfile::tempdir().unwrap();
        let (inter, items) = toy_corpus(dir.path());
        let out = ingest(&inter, &items, &small_opts()).unwrap();
        for inst in out.split.train.iter().chain(&out.split.validation).chain(&out.split.test) {
            assert_eq!(inst.prompt_context.len(), 9);
            assert_eq!(inst.sampled_negatives.len(), 3);
            assert_eq!(inst.candidates.len(), 5);
            assert!(inst.candidates.contains(&inst.positive));
            assert!(inst.candidates.windows(2).all(|w| w[0] < w[1]));
            for neg in &inst.sampled_negatives {
                assert_ne!(*neg, inst.positive);
                assert!(!inst.prompt_context.contains(neg));
            }
            for c in &inst.candidates {
                assert!(*c == inst.positive || !inst.prompt_context.contains(c));
            }
        }
    }

    #[test]
    fn unknown_item_token_is_a_reference_error_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(dir.path(), "items.tsv", &items_tsv(5));
        let inter = write_file(dir.path(), "inter.tsv", "u1\t0\t1\nu1\tBADITEM\t5\nu1\t2\t9\n");
        let err = ingest(&inter, &items, &small_opts()).unwrap_err();
        match err {
            DataError::UnknownItem { line, token, .. } => {
                assert_eq!(line, 2);
                assert_eq!(token, "BADITEM");
            }
            other => panic!("expected UnknownItem, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_its_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(dir.path(), "items.tsv", &items_tsv(5));
        let inter = write_file(dir.path(), "inter.tsv", "u1\t0\t1\nu1\t1\n");
        let err = ingest(&inter, &items, &small_opts()).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn non_integer_timestamp_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(dir.path(), "items.tsv", &items_tsv(5));
        let inter = write_file(dir.path(), "inter.tsv", "u1\t0\tlately\n");
        assert!(matches!(ingest(&inter, &items, &small_opts()), Err(DataError::Parse { .. })));
    }

    #[test]
    fn duplicate_item_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(dir.path(), "items.tsv", "0\ta\n1\tb\n0\tagain\n");
        let inter = write_file(dir.path(), "inter.tsv", "u\t0\t1\nu\t1\t2\n");
        let err = ingest(&inter, &items, &small_opts()).unwrap_err();
        assert!(matches!(err, DataError::DuplicateItem { id: 0, line: 3, .. }));
    }

    #[test]
    fn single_interaction_users_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(dir.path(), "items.tsv", &items_tsv(30));
        let mut s = String::from("lonely\t0\t1\n");
        for u in 0..10 {
            for t in 0..3 {
                s.push_str(&format!("u{u}\t{}\t{t}\n", u + t));
            }
        }
        let inter = write_file(dir.path(), "inter.tsv", &s);
        let out = ingest(&inter, &items, &small_opts()).unwrap();
        assert_eq!(out.dropped_users, 1);
        let total = out.split.train.len() + out.split.validation.len() + out.split.test.len();
        assert_eq!(total, 10);
    }

    #[test]
    fn out_of_order_rows_are_sorted_chronologically_per_user() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(dir.path(), "items.tsv", &items_tsv(30));
        let inter =
            write_file(dir.path(), "inter.tsv", "u\t5\t30\nu\t3\t10\nu\t4\t20\nv\t1\t1\nv\t2\t2\nv\t3\t3\n");
        let out = ingest(&inter, &items, &small_opts()).unwrap();
        let u_inst = out
            .split
            .train
            .iter()
            .chain(&out.split.validation)
            .chain(&out.split.test)
            .find(|i| i.user_id == 0)
            .unwrap();
        assert_eq!(u_inst.prompt_context, vec![3, 4]);
        assert_eq!(u_inst.positive, 5);
    }

    #[test]
    fn sliding_window_yields_one_instance_per_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let (inter, items) = toy_corpus(dir.path());
        let opts = BuildOptions { sliding_window: true, ..small_opts() };
        let out = ingest(&inter, &items, &opts).unwrap();
        let total = out.split.train.len() + out.split.validation.len() + out.split.test.len();
        assert_eq!(total, 10 * 9);
        // Global chronological ordering still holds across parts.
        let max_train = out.split.train.iter().map(|i| i.target_timestamp).max().unwrap();
        let min_test = out.split.test.iter().map(|i| i.target_timestamp).min().unwrap();
        assert!(max_train <= min_test);
    }

    #[test]
    fn pop_counts_match_brute_force_recount_and_exclude_held_out_parts() {
        let dir = tempfile::tempdir().unwrap();
        let (inter, items) = toy_corpus(dir.path());
        let out = ingest(&inter, &items, &small_opts()).unwrap();
        let split = &out.split;
        let brute = pop_counts_of(&split.catalog, &split.train).unwrap();
        assert_eq!(split.pop_counts, brute);
        let with_test = pop_counts_of(
            &split.catalog,
            &split.train.iter().chain(&split.test).cloned().collect::<Vec<_>>(),
        )
        .unwrap();
        assert_ne!(split.pop_counts, with_test);
    }

    #[test]
    fn item_in_three_training_sequences_counts_three() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(dir.path(), "items.tsv", &items_tsv(30));
        // Ten users so the split keeps eight in train; item 25 appears once in
        // the history of users 0, 1, 2 (all of which land in train).
        let mut s = String::new();
        for u in 0..10 {
            let first = if u < 3 { 25 } else { u };
            s.push_str(&format!("u{u}\t{first}\t0\nu{u}\t{}\t1\nu{u}\t{}\t{}\n", u + 3, u + 6, 100 + u));
        }
        let inter = write_file(dir.path(), "inter.tsv", &s);
        let out = ingest(&inter, &items, &small_opts()).unwrap();
        let idx = out.split.catalog.idx_of(25).unwrap();
        assert_eq!(out.split.pop_counts[idx], 3);
    }

    #[test]
    fn ingestion_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (inter, items) = toy_corpus(dir.path());
        let a = ingest(&inter, &items, &small_opts()).unwrap();
        let b = ingest(&inter, &items, &small_opts()).unwrap();
        assert_eq!(a.split.train, b.split.train);
        assert_eq!(a.split.pop_counts, b.split.pop_counts);
    }
}
