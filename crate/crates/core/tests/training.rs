//! End-to-end training behaviour on small synthetic corpora.

use avjoint::dataio::{generate_synthetic, SyntheticSpec};
use avjoint::retrieval::{build_store, query_cross_modal, rank, Direction};
use avjoint::trainer::{fit, TrainingConfig};

fn spec(n: usize) -> SyntheticSpec {
    SyntheticSpec {
        num_records: n,
        num_classes: 8,
        latent_dim: 6,
        noise_sigma: 0.1,
        labels_per_record: 1,
        visual_dim: 32,
        audio_dim: 16,
        seed: 21,
    }
}

fn config() -> TrainingConfig {
    TrainingConfig {
        batch_size: 64,
        epochs: 10,
        learning_rate: 1e-3,
        lambda_activation_step: 20,
        visual_input_dim: 32,
        audio_input_dim: 16,
        visual_widths: vec![64, 32],
        audio_widths: vec![32],
        embedding_dim: 16,
        num_classes: 8,
        seed: 4,
        ..TrainingConfig::default()
    }
}

#[test]
fn cosine_loss_decreases() {
    let corpus = generate_synthetic(&spec(1024)).unwrap();
    let (_, log) = fit(&corpus, &config()).unwrap();
    assert_eq!(log.rows.len(), 160);
    let tenth = log.rows.len() / 10;
    let mean = |rows: &[avjoint::trainer::LogRow]| rows.iter().map(|r| r.loss.l_cos).sum::<f64>() / rows.len() as f64;
    let first = mean(&log.rows[..tenth]);
    let last = mean(&log.rows[log.rows.len() - tenth..]);
    assert!(last < first, "first {first}, last {last}");
    assert!(log.rows.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn two_rows_for_two_full_batches() {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_records: 2048,
        ..spec(0)
    })
    .unwrap();
    let config = TrainingConfig {
        batch_size: 1024,
        epochs: 1,
        visual_widths: vec![8],
        audio_widths: vec![],
        embedding_dim: 4,
        ..config()
    };
    let (_, log) = fit(&corpus, &config).unwrap();
    assert_eq!(log.rows.len(), 2);
    let text = log.to_delimited();
    assert!(text.starts_with("step,lambda,l_cos,l_class,l2,total\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn trained_store_finds_own_counterpart() {
    let corpus = generate_synthetic(&spec(1024)).unwrap();
    let config = TrainingConfig { epochs: 60, ..config() };
    let (model, _) = fit(&corpus, &config).unwrap();
    let store = build_store(&model, &corpus.records()[..200]).unwrap();
    let mut own_first = 0;
    for r in &corpus.records()[..200] {
        let with_self = query_cross_modal(&store, &r.id, Direction::AudioToVideo, false, Some(1)).unwrap();
        if with_self.hits[0].id == r.id {
            own_first += 1;
        }
        let without = query_cross_modal(&store, &r.id, Direction::AudioToVideo, true, Some(3)).unwrap();
        assert!(without.hits.iter().all(|h| h.id != r.id));
    }
    // Chance level is one query in 200.
    assert!(own_first > 20, "own counterpart ranked first for {own_first}/200");

    // A query's top hit carries the same score `rank` reports for its embedding.
    let q = store.embeddings(avjoint::network::Modality::Visual).row(5).to_vec();
    let by_rank = rank(&store, &q, Direction::VideoToAudio, Some(1)).unwrap();
    let by_id = query_cross_modal(&store, &store.ids()[5].clone(), Direction::VideoToAudio, false, Some(1)).unwrap();
    assert_eq!(by_rank.hits, by_id.hits);
}
