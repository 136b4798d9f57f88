use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;
use crate::Error;

fn row(user: &str, item: &str, ts: i64) -> Interaction {
    Interaction {
        user: user.into(),
        item: item.into(),
        timestamp: ts,
    }
}

// ---------------------------------------------------------------- parsing

#[test]
fn parses_movielens_line() {
    let p = parse_reader("1::1193::5::978300760\n".as_bytes(), Format::MovielensDat, 0).unwrap();
    assert_eq!(p.interactions, vec![row("1", "1193", 978300760)]);
}

#[test]
fn parses_csv_by_header_names() {
    let p = parse_reader("user,item,timestamp\nu1,i9,100\n".as_bytes(), Format::Csv, 0).unwrap();
    assert_eq!(p.interactions, vec![row("u1", "i9", 100)]);
    let p = parse_reader("timestamp,rating,item,user\n7,4.5,x,y\n".as_bytes(), Format::Csv, 0).unwrap();
    assert_eq!(p.interactions, vec![row("y", "x", 7)]);
}

#[test]
fn empty_input_is_an_error() {
    for (text, fmt) in [("", Format::MovielensDat), ("user,item,timestamp\n", Format::Csv)] {
        match parse_reader(text.as_bytes(), fmt, 0) {
            Err(Error::Data(msg)) => assert_eq!(msg, "empty dataset"),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn malformed_rows_name_their_line() {
    let text = "1::2::3::4\n1::2::3\n";
    match parse_reader(text.as_bytes(), Format::MovielensDat, 0) {
        Err(Error::Data(msg)) => assert!(msg.starts_with("line 2:"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let text = "user,item,timestamp\na,b,1\na,b,notanumber\n";
    match parse_reader(text.as_bytes(), Format::Csv, 0) {
        Err(Error::Data(msg)) => assert!(msg.starts_with("line 3:"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_rows_within_threshold_are_counted() {
    let text = "1::2::3::4\nbad\n5::6::7::x\n8::9::1::2\n";
    let p = parse_reader(text.as_bytes(), Format::MovielensDat, 2).unwrap();
    assert_eq!(p.interactions.len(), 2);
    assert_eq!(p.malformed.iter().map(|m| m.line).collect::<Vec<_>>(), vec![2, 3]);
    assert!(parse_reader(text.as_bytes(), Format::MovielensDat, 1).is_err());
}

#[test]
fn missing_file_names_the_path() {
    let err = parse_interactions(std::path::Path::new("/no/such/ratings.dat"), Format::MovielensDat, 0).unwrap_err();
    assert!(err.to_string().contains("/no/such/ratings.dat"));
}

#[test]
fn reads_from_disk() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "user,item,timestamp,rating").unwrap();
    writeln!(f, "a,x,3,1").unwrap();
    let p = parse_interactions(f.path(), Format::Csv, 0).unwrap();
    assert_eq!(p.interactions, vec![row("a", "x", 3)]);
}

#[test]
fn format_names() {
    assert_eq!("movielens-dat".parse::<Format>().unwrap(), Format::MovielensDat);
    assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
    assert!("tsv".parse::<Format>().is_err());
}

// ---------------------------------------------------------------- sequences

/// Brute-force fixpoint: rescan with plain counting until nothing changes.
fn filter_oracle(rows: &[Interaction], min_user: usize, min_item: usize) -> Vec<usize> {
    let mut keep = vec![true; rows.len()];
    loop {
        let mut changed = false;
        for i in 0..rows.len() {
            if !keep[i] {
                continue;
            }
            let nu = (0..rows.len()).filter(|&j| keep[j] && rows[j].user == rows[i].user).count();
            let ni = (0..rows.len()).filter(|&j| keep[j] && rows[j].item == rows[i].item).count();
            if nu < min_user || ni < min_item {
                keep[i] = false;
                changed = true;
            }
        }
        if !changed {
            return (0..rows.len()).filter(|&i| keep[i]).collect();
        }
    }
}

#[test]
fn single_user_boundary_is_kept() {
    let rows: Vec<_> = (0..5).map(|t| row("u", &format!("i{t}"), t)).collect();
    let s = build_sequences(&rows, 5, 1).unwrap();
    assert_eq!(s.sequences, vec![vec![1, 2, 3, 4, 5]]);
}

#[test]
fn filtering_cascades() {
    // user b (2 rows) goes first, which leaves item z with one interaction;
    // dropping z takes user a below the threshold too
    let rows = vec![
        row("b", "z", 0),
        row("b", "q", 1),
        row("a", "y", 0),
        row("a", "y", 1),
        row("a", "z", 2),
        row("c", "y", 1),
        row("c", "y", 2),
        row("c", "y", 3),
    ];
    assert_eq!(k_core(&rows, 3, 2), vec![5, 6, 7]);
    assert_eq!(k_core(&rows, 3, 2), filter_oracle(&rows, 3, 2));
    let s = build_sequences(&rows, 3, 2).unwrap();
    assert_eq!(s.users, vec!["c".to_string()]);
    assert_eq!(s.sequences, vec![vec![1, 1, 1]]);
    assert!(matches!(build_sequences(&rows, 5, 1), Err(Error::Data(_))));
}

#[test]
fn toy_log_matches_fixpoint_oracle() {
    let rows = vec![
        row("u1", "a", 1),
        row("u1", "b", 2),
        row("u1", "c", 3),
        row("u2", "a", 1),
        row("u2", "b", 5),
        row("u3", "c", 1),
        row("u3", "d", 2),
        row("u3", "a", 3),
        row("u2", "c", 7),
    ];
    for (mu, mi) in [(1, 1), (2, 2), (3, 2), (3, 3), (2, 3)] {
        assert_eq!(k_core(&rows, mu, mi), filter_oracle(&rows, mu, mi), "({mu}, {mi})");
    }
}

fn arb_log() -> impl Strategy<Value = Vec<Interaction>> {
    prop::collection::vec((0u8..6, 0u8..8, 0i64..5), 1..60)
        .prop_map(|v| v.into_iter().map(|(u, i, t)| row(&format!("u{u}"), &format!("i{i}"), t)).collect())
}

proptest! {
    #[test]
    fn k_core_matches_oracle(rows in arb_log(), mu in 1usize..5, mi in 1usize..5) {
        let kept = k_core(&rows, mu, mi);
        prop_assert_eq!(&kept, &filter_oracle(&rows, mu, mi));
        let mut users: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &kept {
            *users.entry(&rows[i].user).or_default() += 1;
            *items.entry(&rows[i].item).or_default() += 1;
        }
        prop_assert!(users.values().all(|&c| c >= mu));
        prop_assert!(items.values().all(|&c| c >= mi));
    }

    #[test]
    fn id_maps_are_bijective(rows in arb_log()) {
        let s = build_sequences(&rows, 1, 1).unwrap();
        let names: HashSet<&String> = s.items[1..].iter().collect();
        prop_assert_eq!(names.len(), s.num_items());
        for (id, name) in s.items.iter().enumerate().skip(1) {
            prop_assert_eq!(s.item_id(name), Some(id));
        }
        prop_assert_eq!(s.num_interactions(), rows.len());
        let mut sorted = s.users.clone();
        sorted.sort();
        prop_assert_eq!(&sorted, &s.users);
    }
}

#[test]
fn ordering_and_id_assignment() {
    let rows = vec![
        row("b", "x", 5),
        row("a", "y", 2),
        row("b", "z", 1),
        row("a", "x", 2),
        row("b", "w", 5),
    ];
    let s = build_sequences(&rows, 1, 1).unwrap();
    assert_eq!(s.users, vec!["a", "b"]);
    // a: y then x (timestamp tie, file order); b: z, x, w
    assert_eq!(s.items, vec!["", "y", "x", "z", "w"]);
    assert_eq!(s.sequences, vec![vec![1, 2], vec![3, 2, 4]]);
}

// ---------------------------------------------------------------- split

#[test]
fn split_examples() {
    let s = split_leave_one_out(&[vec![1, 2, 3, 4, 5], vec![6, 7, 8], vec![1, 2]]);
    assert_eq!(s.train, vec![vec![1, 2, 3], vec![6]]);
    assert_eq!((s.valid.clone(), s.test.clone()), (vec![4, 7], vec![5, 8]));
    assert_eq!(s.users, vec![0, 1]);
    assert_eq!(s.skipped, 1);
}

#[test]
fn split_reconstructs_every_sequence() {
    let mut r = rng::stream(0, "split", &[]);
    let seqs: Vec<Vec<usize>> = (0..100)
        .map(|_| (0..r.random_range(3..20)).map(|_| r.random_range(1..50)).collect())
        .collect();
    let s = split_leave_one_out(&seqs);
    assert_eq!(s.len(), 100);
    for i in 0..100 {
        assert_eq!(s.full_sequence(i), seqs[s.users[i]]);
    }
}

#[test]
fn phase_examples() {
    let s = split_leave_one_out(&[vec![1, 2, 3, 4, 5], vec![6, 7, 8]]);
    let ex = |p| s.examples(p);
    let train = ex(Phase::Train);
    assert_eq!(train.len(), 1);
    assert_eq!((train[0].input.clone(), train[0].target), (vec![1, 2], 3));
    let valid = ex(Phase::Valid);
    assert_eq!((valid[1].input.clone(), valid[1].target), (vec![6], 7));
    let test = ex(Phase::Test);
    assert_eq!((test[0].input.clone(), test[0].target), (vec![1, 2, 3, 4], 5));
    // valid and test differ only in the target (and the one extra input item)
    assert_eq!(&test[0].input[..3], &valid[0].input[..]);
}

// ---------------------------------------------------------------- batching

fn examples(n: usize) -> Vec<Example> {
    (0..n)
        .map(|u| Example {
            user: u,
            input: (1..=(u % 7 + 1)).collect(),
            target: 9,
        })
        .collect()
}

#[test]
fn batches_are_deterministic_per_seed_and_epoch() {
    let ex = examples(23);
    let a = batch_iter(&ex, 5, 4, 7, 3).unwrap();
    assert_eq!(a, batch_iter(&ex, 5, 4, 7, 3).unwrap());
    assert_ne!(a, batch_iter(&ex, 5, 4, 7, 4).unwrap());
    assert_ne!(a, batch_iter(&ex, 5, 4, 8, 3).unwrap());
    let mut users: Vec<usize> = a.iter().flat_map(|b| b.users.clone()).collect();
    users.sort();
    assert_eq!(users, (0..23).collect::<Vec<_>>());
    assert_eq!(a.last().unwrap().batch_size, 3);
}

#[test]
fn long_sequences_keep_their_most_recent_items() {
    let ex = [Example {
        user: 0,
        input: vec![1, 2, 3, 4, 5, 6, 7],
        target: 8,
    }];
    let b = Batch::from_examples(&ex, 5).unwrap();
    assert_eq!(b.items, vec![3, 4, 5, 6, 7]);
    assert_eq!(b.lengths, vec![5]);
}

#[test]
fn batch_larger_than_dataset_gives_one_partial_batch() {
    let b = batch_iter(&examples(3), 10, 64, 0, 0).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].batch_size, 3);
}

#[test]
fn rows_are_left_padded_to_the_longest() {
    let ex = [
        Example {
            user: 0,
            input: vec![4],
            target: 1,
        },
        Example {
            user: 1,
            input: vec![5, 6, 7],
            target: 2,
        },
    ];
    let b = Batch::from_examples(&ex, 10).unwrap();
    assert_eq!(b.seq_len, 3);
    assert_eq!(b.items, vec![0, 0, 4, 5, 6, 7]);
    assert_eq!(b.token_mask(), vec![false, false, true, true, true, true]);
    assert_eq!(b.with_extra_padding(2).row(0), &[0, 0, 0, 0, 4]);
}

#[test]
fn batch_rejects_padding_targets_and_empty_inputs() {
    let bad = |input: Vec<usize>, target| Batch::from_examples(&[Example { user: 0, input, target }], 4);
    assert!(bad(vec![1], 0).is_err());
    assert!(bad(vec![], 1).is_err());
    assert!(batch_iter(&examples(2), 4, 0, 0, 0).is_err());
}

// ---------------------------------------------------------------- dataset file

fn toy_dataset() -> Dataset {
    let rows: Vec<Interaction> = (0..3)
        .flat_map(|u| (0..4 + u).map(move |t| row(&format!("u{u}"), &format!("i{}", (u + t) % 5), t as i64)))
        .collect();
    let s = build_sequences(&rows, 1, 1).unwrap();
    Dataset::from_sequences(
        &s,
        Preprocessing {
            source: "toy".into(),
            format: Format::Csv,
            min_user: 1,
            min_item: 1,
            malformed_rows: 0,
        },
    )
    .unwrap()
}

#[test]
fn dataset_file_round_trips() {
    let ds = toy_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
    let s = ds.summary();
    assert_eq!((s.users, s.items, s.interactions), (3, 5, 4 + 5 + 6));
}

#[test]
fn dataset_version_mismatch_is_rejected() {
    let mut ds = toy_dataset();
    ds.format_version = 99;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    ds.save(&path).unwrap();
    assert!(matches!(Dataset::load(&path), Err(Error::Data(_))));
    std::fs::write(&path, "{\"nope\": 1}").unwrap();
    assert!(matches!(Dataset::load(&path), Err(Error::Data(_))));
}

// ---------------------------------------------------------------- synthetic data

#[test]
fn successor_cycle_is_a_deterministic_function_of_the_item() {
    let seqs = synthetic::successor_cycle(32, 50, 12, 0);
    assert_eq!(seqs, synthetic::successor_cycle(32, 50, 12, 0));
    let mut next = BTreeMap::new();
    for s in &seqs {
        assert_eq!(s.len(), 12);
        for w in s.windows(2) {
            assert_eq!(*next.entry(w[0]).or_insert(w[1]), w[1]);
        }
    }
    let items: HashSet<usize> = seqs.iter().flatten().copied().collect();
    assert_eq!(items.len(), 50);
}

#[test]
fn held_out_transitions_are_seen_in_training() {
    let seqs = synthetic::successor_cycle(32, 50, 12, 0);
    let split = split_leave_one_out(&seqs);
    let seen: HashSet<(usize, usize)> = split.train.iter().flat_map(|t| t.windows(2).map(|w| (w[0], w[1]))).collect();
    for i in 0..split.len() {
        let last = *split.train[i].last().unwrap();
        assert!(seen.contains(&(last, split.valid[i])));
        assert!(seen.contains(&(split.valid[i], split.test[i])));
    }
    let rows = synthetic::to_interactions(&seqs);
    let rebuilt = build_sequences(&rows, 1, 1).unwrap();
    assert_eq!(rebuilt.sequences.len(), 32);
}
