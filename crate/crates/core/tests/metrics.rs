mod common;

use clipforge::eval::{metric_columns, metric_values, mrr_at_k, rank_items, recall_at_k, RetrievalTask};
use clipforge::tensor::Tensor;
use common::oracle::{check_task, random_task};
use common::rng;

#[test]
fn matches_brute_force_on_random_instances() {
    let mut r = rng(2024);
    for i in 0..300 {
        let task = random_task(&mut r, 500);
        if let Err(e) = check_task(&task) {
            panic!("instance {i}: {e}");
        }
    }
}

#[test]
fn hand_worked_ranks() {
    // candidate scores for the single query: [0.2, 0.9, 0.9, -1.0]
    let task = RetrievalTask {
        queries: Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap(),
        candidates: Tensor::new(vec![4, 1], vec![0.2, 0.9, 0.9, -1.0]).unwrap(),
        relevant: vec![vec![2], vec![1], vec![3, 0]],
    };
    // ties go to the lower index, so candidate 2 sits behind candidate 1
    assert_eq!(rank_items(&task).unwrap(), vec![2, 1, 3]);
}

#[test]
fn hand_worked_metrics() {
    let ranks = [1, 3, 11, 2];
    assert_eq!(recall_at_k(&ranks, 1), 0.25);
    assert_eq!(recall_at_k(&ranks, 10), 0.75);
    assert_eq!(mrr_at_k(&ranks, 10), (1.0 + 1.0 / 3.0 + 0.5) / 4.0);
    assert_eq!(mrr_at_k(&ranks, 1), 0.25);
    assert_eq!(metric_columns(&[1, 5]), ["R@1", "R@5", "MRR@1", "MRR@5"]);
    assert_eq!(metric_values(&[1, 6], &[1, 5]), vec![50.0, 50.0, 50.0, 50.0]);
}

#[test]
fn rejects_bad_tasks() {
    let t = |nc: usize, relevant: Vec<Vec<usize>>| RetrievalTask {
        queries: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
        candidates: Tensor::new(vec![nc, 2], vec![0.5; nc * 2]).unwrap(),
        relevant,
    };
    assert!(rank_items(&t(2, vec![vec![]])).is_err());
    assert!(rank_items(&t(2, vec![vec![2]])).is_err());
    assert!(rank_items(&t(2, vec![])).is_err());
    assert!(rank_items(&t(0, vec![vec![0]])).is_err());
}

#[test]
#[should_panic(expected = "k must be >= 1")]
fn recall_at_zero_panics() {
    recall_at_k(&[1], 0);
}

#[test]
fn constant_text_embedding_gives_chance_by_index() {
    use clipforge::data::{load_dataset, Vocabulary};
    use clipforge::eval::{evaluate, EvalOptions, ReportMeta};
    use clipforge::model::{DualEncoderModel, ModelConfig};

    let dir = tempfile::tempdir().unwrap();
    common::make_dataset(dir.path(), 40, 2, 4, 6);
    let ds = load_dataset(dir.path()).unwrap();
    let vocab = Vocabulary::from_dataset(&ds);
    let cfg = ModelConfig { vocab_size: vocab.len(), ..common::micro_config() };
    let mut m = DualEncoderModel::new(cfg, 0).unwrap();
    m.param_mut("text_projection").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let opts = EvalOptions { ks: vec![1, 5, 10], ..Default::default() };
    let r = evaluate(&m, &ds, &vocab, &opts, ReportMeta::new("x", 0, "d")).unwrap();
    // every score ties, so image i lands at rank i + 1
    let n = ds.len();
    let ranks: Vec<usize> = (1..=n).collect();
    let want = metric_values(&ranks, &[1, 5, 10]);
    for row in r.rows.iter().chain([&r.average]) {
        assert_eq!(row.values, want, "{}", row.language);
    }
    assert_eq!(want[0], 100.0 * (1.0 / n as f64));
}

#[test]
fn bundled_table4_averages() {
    use clipforge::eval::BaselineTable;
    for (name, expect) in [
        ("table4-nllb-clip-large", [42.96, 69.65, 78.87]),
        ("table4-nllb-clip-base", [33.99, 61.11, 71.85]),
    ] {
        let t = BaselineTable::bundled(name).unwrap();
        let checks = t.average_checks();
        for (col, want) in ["R@1", "R@5", "R@10"].iter().zip(expect) {
            let c = checks.iter().find(|c| c.column == *col).unwrap();
            assert!((c.recomputed - want).abs() <= 0.005, "{name} {col}: {} vs {want}", c.recomputed);
            assert!(c.ok());
        }
    }
}
