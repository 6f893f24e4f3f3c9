use std::collections::{BTreeMap, HashSet};

use fedsp::autograd::Tape;
use fedsp::data::{
    accuracy_from_scores, make_toy_tasks, make_toy_tasks_with, mc_accuracy, option_scores, partition, predict, ArithOp,
    Corpus, McExample, Partition, Scheme, Split, TaskSpec, Tokenizer,
};
use fedsp::model::{GlobalModel, LanguageModel, ModelConfig, PromptSet, Reparam, TokenBatch};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_for(corpus: &Corpus, seed: u64) -> GlobalModel<f64> {
    let c = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: corpus.tokenizer.vocab_size(),
        max_seq_len: 8,
        prefix_len: 2,
        reparam: Reparam::Off,
    };
    GlobalModel::init(&c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(make_toy_tasks(0), make_toy_tasks(0));
    assert_ne!(make_toy_tasks(0).1, make_toy_tasks(1).1);
}

#[test]
fn gold_options_follow_the_target_rule() {
    for target in ArithOp::ALL {
        let spec = TaskSpec {
            target,
            ..TaskSpec::default()
        };
        let (corpus, examples) = make_toy_tasks_with(3, &spec).unwrap();
        assert_eq!(examples.len(), spec.eval_pairs);
        for ex in &examples {
            let digits: Vec<usize> = ex.context.chars().filter_map(|c| c.to_digit(10)).map(|d| d as usize).collect();
            let want = target.apply(digits[0], digits[1], spec.modulus).to_string();
            assert_eq!(ex.options[ex.gold], want);
            let distinct: HashSet<&String> = ex.options.iter().collect();
            assert_eq!(distinct.len(), 4);
        }
        let eval_docs: HashSet<String> = corpus.indices(Split::Eval).iter().map(|&i| corpus.docs[i].text.clone()).collect();
        for &i in &corpus.indices(Split::Train) {
            assert!(!eval_docs.contains(&corpus.docs[i].text));
        }
    }
}

#[test]
fn default_corpus_fills_eleven_shards_of_a_batch() {
    let (corpus, _) = make_toy_tasks(0);
    assert!(corpus.indices(Split::Train).len() >= 11 * 16);
}

#[test]
fn tokenizer_round_trips_every_document() {
    let (corpus, _) = make_toy_tasks(0);
    let v = corpus.tokenizer.vocab_size();
    for d in &corpus.docs {
        let ids = corpus.tokenizer.encode(&d.text).unwrap();
        assert!(ids.iter().all(|&i| i < v && i >= 2));
        assert_eq!(corpus.tokenizer.decode(&ids).unwrap(), d.text);
    }
}

#[test]
fn corpus_and_partition_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = make_toy_tasks(0);
    let path = dir.path().join("corpus.jsonl");
    corpus.save_jsonl(&path).unwrap();
    assert_eq!(Corpus::load_jsonl(&path).unwrap(), corpus);
    let part = partition(&corpus, 10, Scheme::LabelSkew { alpha: 0.5 }, 2).unwrap();
    let ppath = dir.path().join("partition.json");
    part.save(&ppath).unwrap();
    assert_eq!(Partition::load(&ppath).unwrap(), part);
}

#[test]
fn shards_are_disjoint_and_inside_the_train_split() {
    let (corpus, _) = make_toy_tasks(0);
    let train: HashSet<usize> = corpus.indices(Split::Train).into_iter().collect();
    for scheme in [Scheme::Iid, Scheme::LabelSkew { alpha: 0.3 }] {
        for seed in 0..5 {
            let p = partition(&corpus, 10, scheme, seed).unwrap();
            let mut seen = HashSet::new();
            for i in p.proxy.iter().chain(p.clients.iter().flatten()) {
                assert!(train.contains(i));
                assert!(seen.insert(*i), "index {} appears twice", i);
            }
            assert_eq!(seen.len(), train.len());
            if scheme == Scheme::Iid {
                let (lo, hi) = (p.sizes().into_iter().min().unwrap(), p.sizes().into_iter().max().unwrap());
                assert!(hi - lo <= 1);
            }
        }
    }
}

/// Sum over clients of the chi-squared distance between the client's
/// category counts and the train split's category proportions.
fn chi2(corpus: &Corpus, p: &Partition) -> f64 {
    let mut global: BTreeMap<usize, f64> = BTreeMap::new();
    let train = corpus.indices(Split::Train);
    for &i in &train {
        *global.entry(corpus.docs[i].category).or_default() += 1.0;
    }
    let mut total = 0.0;
    for shard in &p.clients {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for &i in shard {
            *counts.entry(corpus.docs[i].category).or_default() += 1.0;
        }
        for (cat, g) in &global {
            let expected = shard.len() as f64 * g / train.len() as f64;
            let got = counts.get(cat).copied().unwrap_or(0.0);
            total += (got - expected).powi(2) / expected;
        }
    }
    total
}

#[test]
fn label_skew_with_large_alpha_approaches_iid_proportions() {
    let (corpus, _) = make_toy_tasks(0);
    let seeds = 0..50u64;
    let mut iid: Vec<f64> = seeds.clone().map(|s| chi2(&corpus, &partition(&corpus, 10, Scheme::Iid, s).unwrap())).collect();
    iid.sort_by(f64::total_cmp);
    let p95 = iid[(0.95 * iid.len() as f64).ceil() as usize - 1];
    let flat = |alpha: f64| -> Vec<f64> {
        seeds
            .clone()
            .map(|s| chi2(&corpus, &partition(&corpus, 10, Scheme::LabelSkew { alpha }, s).unwrap()))
            .collect()
    };
    let near_iid = flat(1e6);
    assert!(near_iid.iter().all(|&c| c < p95), "p95 {} vs {:?}", p95, near_iid);
    let skewed = flat(0.1);
    let mean = skewed.iter().sum::<f64>() / skewed.len() as f64;
    assert!(mean > p95, "alpha 0.1 mean {} not above iid p95 {}", mean, p95);
}

fn log_softmax(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row {
        z += (v - max).exp();
    }
    row[target] - max - z.ln()
}

#[test]
fn option_scores_match_a_per_sequence_oracle() {
    let (corpus, examples) = make_toy_tasks(0);
    let g = model_for(&corpus, 5);
    let prompts = PromptSet::init(&g.cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let tok = &corpus.tokenizer;
    for with_prompts in [false, true] {
        let p = with_prompts.then_some(&prompts);
        let scores = option_scores(&g, p, &examples, tok).unwrap();
        for (ex, row) in examples.iter().zip(&scores) {
            for (opt, &got) in ex.options.iter().zip(row) {
                let ctx = tok.encode_doc(&ex.context).unwrap();
                let mut seq = ctx.clone();
                seq.extend(tok.encode(opt).unwrap());
                let batch = TokenBatch::from_sequences(&[seq.clone()], Tokenizer::PAD).unwrap();
                let mut tape = Tape::new();
                let pre = p.map(|p| p.materialize(&mut tape).unwrap());
                let y = g.logits(&mut tape, pre.as_deref(), &batch).unwrap();
                let logits = tape.value(y);
                let v = g.cfg.vocab_size;
                let mut want = 0.0;
                for pos in ctx.len()..seq.len() {
                    want += log_softmax(&logits[(pos - 1) * v..pos * v], seq[pos]);
                }
                assert!((got - want).abs() <= 1e-10, "{} vs {}", got, want);
            }
        }
    }
}

#[test]
fn uniform_logits_pick_the_first_option() {
    let (corpus, examples) = make_toy_tasks(0);
    let mut g = model_for(&corpus, 0);
    g.head.w.data_mut().fill(0.0);
    g.head.b.data_mut().fill(0.0);
    let acc = mc_accuracy(&g, None, &examples, &corpus.tokenizer).unwrap();
    let first = examples.iter().filter(|e| e.gold == 0).count() as f64 / examples.len() as f64;
    assert_eq!(acc, first);
}

#[test]
fn an_oracle_scorer_is_always_right() {
    let (_, examples) = make_toy_tasks(0);
    let scores: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| (0..e.options.len()).map(|i| if i == e.gold { f64::MAX } else { -1.0 }).collect())
        .collect();
    assert_eq!(accuracy_from_scores(&scores, &examples).unwrap(), 1.0);
}

#[test]
fn accuracy_ignores_option_order() {
    let (corpus, examples) = make_toy_tasks(0);
    let g = model_for(&corpus, 1);
    let base = mc_accuracy(&g, None, &examples, &corpus.tokenizer).unwrap();
    let scores = option_scores(&g, None, &examples, &corpus.tokenizer).unwrap();
    for row in &scores {
        let distinct: HashSet<u64> = row.iter().map(|s| s.to_bits()).collect();
        assert_eq!(distinct.len(), row.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let permuted: Vec<McExample> = examples
            .iter()
            .map(|e| {
                let mut order: Vec<usize> = (0..e.options.len()).collect();
                order.shuffle(&mut rng);
                McExample {
                    context: e.context.clone(),
                    options: order.iter().map(|&i| e.options[i].clone()).collect(),
                    gold: order.iter().position(|&i| i == e.gold).unwrap(),
                }
            })
            .collect();
        assert_eq!(mc_accuracy(&g, None, &permuted, &corpus.tokenizer).unwrap(), base);
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    assert_eq!(predict(&[1.0, 1.0, 0.5]), 0);
    assert_eq!(predict(&[0.0, 2.0, 2.0]), 1);
}

#[test]
fn empty_probe_sets_are_rejected() {
    let (corpus, _) = make_toy_tasks(0);
    let g = model_for(&corpus, 0);
    assert!(mc_accuracy(&g, None, &[], &corpus.tokenizer).is_err());
}
