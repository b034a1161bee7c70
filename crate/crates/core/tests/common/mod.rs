//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radreport::data::{build_vocab, FeatureKind, VocabPolicy};
use radreport::model::{ExampleInput, ModelConfig, PpkedModel};
use radreport::poke::TopicBag;
use radreport::prke::KnowledgeGraph;
use radreport::{ParamId, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_grads(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    (0..inputs.len())
        .map(|k| {
            (0..inputs[k].len())
                .map(|i| {
                    let orig = inputs[k].data()[i];
                    work[k].data_mut()[i] = orig + h;
                    let up = f(&work);
                    work[k].data_mut()[i] = orig - h;
                    let down = f(&work);
                    work[k].data_mut()[i] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Gradient check of `op` over leaf `inputs`. The op output is reduced with
/// fixed random weights so every output element matters. Returns the worst
/// per-input relative error.
pub fn check_op<F>(inputs: &[Tensor], train_seed: Option<u64>, op: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> radreport::tensor::Result<Var<'t>>,
{
    let tape_for = || match train_seed {
        Some(s) => Tape::training(s),
        None => Tape::new(),
    };
    let weights = {
        let tape = tape_for();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&vars).unwrap().value();
        random_tensor(&mut rng(99), out.rows(), out.cols())
    };
    let scalar = |ts: &[Tensor]| -> f64 {
        let tape = tape_for();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&vars).unwrap();
        out.mul(tape.constant(weights.clone())).unwrap().sum().item()
    };
    let tape = tape_for();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = op(&vars).unwrap().mul(tape.constant(weights.clone())).unwrap().sum();
    let grads = loss.backward().unwrap();
    let numeric = numeric_grads(&scalar, inputs, 1e-5);
    vars.iter()
        .zip(&numeric)
        .map(|(v, n)| rel_err(grads.wrt(*v).unwrap().data(), n))
        .fold(0.0, f64::max)
}

pub const PER_OP_TOL: f64 = 1e-5;

type OpCase = fn(&mut ChaCha8Rng) -> f64;

fn shape(r: &mut impl Rng) -> (usize, usize) {
    (r.random_range(1..=8), r.random_range(1..=8))
}

/// One finite-difference case per differentiable op, each drawing random
/// shapes up to 8×8. Returns the worst relative error.
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |r| {
            let ((m, k), n) = (shape(r), r.random_range(1..=8));
            check_op(&[random_tensor(r, m, k), random_tensor(r, k, n)], None, |v| v[0].matmul(v[1]))
        }),
        ("transpose", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n)], None, |v| Ok(v[0].transpose()))
        }),
        ("add/sub/mul/scale", |r| {
            let (m, n) = shape(r);
            let ins = [random_tensor(r, m, n), random_tensor(r, m, n)];
            check_op(&ins, None, |v| v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(-1.5).mul(v[1]))
        }),
        ("add_row", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n), random_tensor(r, 1, n)], None, |v| v[0].add_row(v[1]))
        }),
        ("mul_col", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n), random_tensor(r, m, 1)], None, |v| v[0].mul_col(v[1]))
        }),
        ("relu", |r| {
            let (m, n) = shape(r);
            let mut x = random_tensor(r, m, n);
            // keep clear of the kink
            x.data_mut().iter_mut().for_each(|v| *v += v.signum() * 0.05);
            check_op(&[x], None, |v| Ok(v[0].relu()))
        }),
        ("sigmoid", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n).map(|x| 3.0 * x)], None, |v| Ok(v[0].sigmoid()))
        }),
        ("softmax rows", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n).map(|x| 2.0 * x)], None, |v| v[0].softmax(1))
        }),
        ("softmax cols", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n).map(|x| 2.0 * x)], None, |v| v[0].softmax(0))
        }),
        ("log_softmax", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n)], None, |v| v[0].log_softmax())
        }),
        ("mask_fill", |r| {
            let n = r.random_range(1..=8);
            let mask = std::sync::Arc::new(radreport::attention::causal_mask(n));
            check_op(&[random_tensor(r, n, n)], None, move |v| v[0].mask_fill(&mask)?.softmax(1))
        }),
        ("layer_norm", |r| {
            let (m, n) = shape(r);
            let n = n.max(2);
            let ins = [random_tensor(r, m, n), random_tensor(r, 1, n), random_tensor(r, 1, n)];
            check_op(&ins, None, |v| v[0].layer_norm(v[1], v[2], 1e-5))
        }),
        ("concat_cols", |r| {
            let (m, n) = shape(r);
            let k = r.random_range(1..=8);
            check_op(&[random_tensor(r, m, n), random_tensor(r, m, k)], None, |v| Var::concat_cols(&[v[0], v[1], v[0]]))
        }),
        ("concat_rows", |r| {
            let (m, n) = shape(r);
            let k = r.random_range(1..=8);
            check_op(&[random_tensor(r, m, n), random_tensor(r, k, n)], None, |v| Var::concat_rows(&[v[1], v[0]]))
        }),
        ("slice_rows/slice_cols", |r| {
            let (m, n) = shape(r);
            let (rs, cs) = (r.random_range(0..m), r.random_range(0..n));
            check_op(&[random_tensor(r, m, n)], None, move |v| v[0].slice_rows(rs, m - rs)?.slice_cols(cs, n - cs))
        }),
        ("gather_rows", |r| {
            let (m, n) = shape(r);
            let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..m)).collect();
            check_op(&[random_tensor(r, m, n)], None, move |v| v[0].gather_rows(&ids))
        }),
        ("mean_rows", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n)], None, |v| Ok(v[0].mean_rows()?.scale(2.0)))
        }),
        ("sum", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n)], None, |v| Ok(v[0].sum()))
        }),
        ("dropout", |r| {
            let (m, n) = shape(r);
            check_op(&[random_tensor(r, m, n)], Some(11), |v| Ok(v[0].dropout(0.3)))
        }),
        ("nll_sum", |r| {
            let (m, n) = shape(r);
            let targets: Vec<Option<usize>> = (0..m).map(|i| (i % 3 != 2).then(|| r.random_range(0..n))).collect();
            check_op(&[random_tensor(r, m, n)], None, move |v| v[0].log_softmax()?.nll_sum(&targets))
        }),
        ("bce_with_logits", |r| {
            let n = r.random_range(1..=8);
            let targets: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..2u8))).collect();
            let pw: Vec<f64> = (0..n).map(|_| r.random_range(0.5..4.0)).collect();
            check_op(&[random_tensor(r, 1, n).map(|x| 4.0 * x)], None, move |v| v[0].bce_with_logits(&targets, &pw))
        }),
    ]
}

pub struct Toy {
    pub model: PpkedModel,
    pub features: Tensor,
    pub retrieved: Tensor,
    pub tokens: Vec<usize>,
}

impl Toy {
    pub fn input(&self) -> ExampleInput<'_> {
        ExampleInput {
            features: &self.features,
            retrieved: &self.retrieved,
        }
    }
}

pub fn toy_bag() -> TopicBag {
    TopicBag::new(["heart", "lung", "bone", "pleura", "normal"]).unwrap()
}

pub const TOY_GRAPH: &str = "chest: heart, lung\nframe: bone, pleura\nnormal: normal\n";

/// d=16, n=2, N_I=4, N_T=5, N_K=6, vocabulary of 30 ids.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_patches: 4,
        feature_dim: 6,
        feature_kind: FeatureKind::Raw,
        d_report: 8,
        n_retrieved: 6,
        ..ModelConfig::default()
    }
}

pub fn toy(seed: u64) -> Toy {
    let words: Vec<String> = ('a'..='z').map(|c| c.to_string()).collect();
    let vocab = build_vocab([words.as_slice()], VocabPolicy::TopK(26)).unwrap();
    assert_eq!(vocab.len(), 30);
    let bag = toy_bag();
    let graph = KnowledgeGraph::parse(TOY_GRAPH, &bag).unwrap();
    let model = PpkedModel::new(toy_config(), vocab, bag, graph, seed).unwrap();
    let mut r = rng(seed + 1000);
    let features = random_tensor(&mut r, 4, 6);
    let retrieved = random_tensor(&mut r, 6, 8);
    let tokens = (0..5).map(|_| r.random_range(4..30)).collect();
    Toy {
        model,
        features,
        retrieved,
        tokens,
    }
}

/// Per-parameter relative error between backprop and central differences of
/// the teacher-forced summed NLL, over up to `samples` entries per tensor.
pub fn model_gradcheck(toy: &mut Toy, samples: usize, seed: u64) -> Vec<(String, f64)> {
    let loss = |t: &Toy| -> f64 {
        let tape = Tape::new();
        let ctx = t.model.bind(&tape);
        t.model.example_nll(&ctx, &t.input(), &t.tokens).unwrap().0.item()
    };
    let analytic = {
        let tape = Tape::new();
        let ctx = toy.model.bind(&tape);
        let (nll, _) = toy.model.example_nll(&ctx, &toy.input(), &toy.tokens).unwrap();
        let grads = tape.backward(nll).unwrap();
        let mut store = toy.model.store.clone();
        store.zero_grad();
        grads.accumulate_into(&mut store);
        store
    };
    let mut r = rng(seed);
    let ids: Vec<ParamId> = toy.model.store.ids().collect();
    let h = 1e-6;
    let mut out = Vec::new();
    for id in ids {
        let n = toy.model.store.value(id).len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| r.random_range(0..n)).collect()
        };
        let mut a = Vec::new();
        let mut num = Vec::new();
        for i in picks {
            let orig = toy.model.store.value(id).data()[i];
            toy.model.store.value_mut(id).data_mut()[i] = orig + h;
            let up = loss(toy);
            toy.model.store.value_mut(id).data_mut()[i] = orig - h;
            let down = loss(toy);
            toy.model.store.value_mut(id).data_mut()[i] = orig;
            num.push((up - down) / (2.0 * h));
            a.push(analytic.grad(id)[i]);
        }
        out.push((toy.model.store.name(id).to_owned(), rel_err(&a, &num)));
    }
    out
}

/// Plain-loop matrix helpers for oracles.
pub fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

/// Direct per-head evaluation of `[Att_1; …; Att_n]·W_O` with an optional
/// allow-mask, returning the pre-sublayer output.
pub fn naive_mha(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    store: &radreport::ParamStore,
    p: &radreport::attention::MhaParams,
    allow: Option<&dyn Fn(usize, usize) -> bool>,
) -> Vec<Vec<f64>> {
    let dn = p.head_dim();
    let mut concat = vec![Vec::new(); x.len()];
    for h in 0..p.n_heads {
        let q = mm(x, &mat(store.value(p.wq[h])));
        let k = mm(y, &mat(store.value(p.wk[h])));
        let v = mm(y, &mat(store.value(p.wv[h])));
        for i in 0..x.len() {
            let mut w: Vec<f64> = (0..y.len())
                .map(|j| {
                    if allow.is_some_and(|f| !f(i, j)) {
                        f64::NEG_INFINITY
                    } else {
                        (0..dn).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dn as f64).sqrt()
                    }
                })
                .collect();
            let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            w.iter_mut().for_each(|s| *s = (*s - m).exp());
            let z: f64 = w.iter().sum();
            for c in 0..dn {
                concat[i].push((0..y.len()).map(|j| w[j] / z * v[j][c]).sum());
            }
        }
    }
    mm(&concat, &mat(store.value(p.wo)))
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    a.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (v - b.get(r, c)).abs()))
        .fold(0.0, f64::max)
}

/// A small end-to-end run rooted at `dir`: synthetic corpus with `records`
/// records, a narrow model and a few epochs at an elevated learning rate.
pub fn desk_run(dir: &std::path::Path, records: usize, seed: u64) -> radreport::config::RunConfig {
    use radreport::config::RunConfig;
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_patches: 18,
        feature_dim: 32,
        feature_kind: FeatureKind::Raw,
        d_report: 16,
        n_retrieved: 4,
        decoder_depth: 1,
        ..ModelConfig::default()
    };
    cfg.vocab.policy = VocabPolicy::MinFrequency(1);
    cfg.train.learning_rate = 1e-3;
    cfg.train.epochs = 3;
    cfg.generate.max_len = 50;
    cfg.synth.num_records = records;
    cfg.synth.seed = seed;
    let d = &mut cfg.data;
    d.corpus = dir.join("data/corpus.jsonl");
    d.features = dir.join("data/features.bin");
    d.manifest = dir.join("data/manifest.json");
    d.index = dir.join("data/index.bin");
    d.checkpoint_dir = dir.join("ckpt");
    d.output_dir = dir.join("out");
    cfg
}
