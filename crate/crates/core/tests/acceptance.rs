//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{array, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rapo::config::RunConfig;
use rapo::embio::{build_contextual_table, normalize_stages, EmbeddingTable, NumericWidth};
use rapo::lexicon::SeedLexicon;
use rapo::mapping::{Activation, AlignmentModel, HouseholderChain, Side};
use rapo::pipeline::{cmd_procrustes, cmd_train, cmd_train_observed, prepare_side, PreparedSide};
use rapo::retrieval::build_index;
use rapo::synth::{generate, SynthFiles, SynthSpec};
use rapo::training::{
    gradients, loss_and_gradients, mse_loss, rank_loss, sample_negatives_with_index, total_loss, LossWeights,
    NegativeSet, Negatives, OptimizerState, Penalties, Tables, TrainConfig, TrainObserver,
};

const ORTHO_TOL: f64 = 1e-10;
const FAST_PATH_TOL: f64 = 1e-10;
const MIN_SPEEDUP: f64 = 5.0;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
// Relative errors are taken against max(|analytic|, |numeric|, FD_FLOOR).
const FD_FLOOR: f64 = 1e-6;
const LN2_TOL: f64 = 1e-12;
const SUP_MIN_P1: f64 = 0.99;
const BASELINE_SLACK: f64 = 0.01;
const NORM_TOL: f64 = 1e-6;
const MEAN_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("orthogonality", orthogonality),
        ("fast-path equivalence", fast_path),
        ("gradient correctness", gradient_check),
        ("loss anchors", loss_anchors),
        ("csls oracle equivalence", csls_oracle),
        ("synthetic recovery, supervised", supervised_recovery),
        ("synthetic self-learning", self_learning),
        ("determinism", determinism),
        ("normalization pipeline", normalization),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let secs = start.elapsed().as_secs_f64();
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {}: {tag} {name} ({secs:.1}s) {}", i + 1, out.detail);
        failed += usize::from(!out.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn frob_from_identity(p: &Array2<f64>) -> f64 {
    let d = p.nrows();
    let gram = p.dot(&p.t()) - Array2::<f64>::eye(d);
    gram.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f64..1.0));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}

fn table(prefix: &str, m: Array2<f64>) -> EmbeddingTable {
    EmbeddingTable::new((0..m.nrows()).map(|i| format!("{prefix}{i}")).collect(), m).unwrap()
}

fn orthogonality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [8, 64, 300];
    let mut worst = 0.0f64;
    for i in 0..100 {
        let d = dims[i % 3];
        let p = HouseholderChain::random(d, d, &mut rng).matrix();
        worst = worst.max(frob_from_identity(&p));
    }

    // 50 Adam steps on a small ranking problem
    let mut worst_trained = 0.0f64;
    for &d in &dims {
        let (n_words, n_pairs) = (40, 12);
        let src = table("s", unit_rows(n_words, d, &mut rng));
        let tgt = table("t", unit_rows(n_words, d, &mut rng));
        let sc = build_contextual_table(&src, 0.5, None).unwrap();
        let tc = build_contextual_table(&tgt, 0.5, None).unwrap();
        let tables = Tables { src: &src, src_ctx: &sc, tgt: &tgt, tgt_ctx: &tc };
        let lex = SeedLexicon::from_pairs((0..n_pairs).map(|i| (i, i)));
        let mut model = AlignmentModel::init(d, d, Activation::Tanh, &mut rng);
        let mut opt = OptimizerState::new(&model);
        let weights = LossWeights { lambda1: 1.0, lambda2: 0.01 };
        for _ in 0..50 {
            let index = build_index(&model, &tables, 5).unwrap();
            let negs = sample_negatives_with_index(&index, &lex, 2, 2, None, &mut rng).unwrap();
            let (_, grads) =
                loss_and_gradients(&model, &tables, lex.pairs(), &negs, &index.penalties(), weights).unwrap();
            opt.step(&mut model, &grads, 0.01, [false; 4]);
        }
        for chain in [&model.src_chain, &model.tgt_chain] {
            worst_trained = worst_trained.max(frob_from_identity(&chain.matrix()));
        }
    }
    outcome(
        worst <= ORTHO_TOL && worst_trained <= ORTHO_TOL,
        format!("max ‖PPᵀ−I‖_F random {worst:.2e}, after Adam {worst_trained:.2e} (bound {ORTHO_TOL:e})"),
    )
}

fn fast_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(2..=48);
        let n = rng.random_range(1..=2 * d);
        let chain = HouseholderChain::random(n, d, &mut rng);
        let z = Array1::from_shape_fn(d, |_| rng.random_range(-2.0f64..2.0));
        let fast = chain.apply(z.view());
        let slow = chain.matrix().dot(&z);
        worst = worst.max((&fast - &slow).iter().fold(0.0, |m, v| m.max(v.abs())));
    }

    // naive application: one dense d×d Householder matrix per reflector
    let d = 300;
    let chain = HouseholderChain::random(d, d, &mut rng);
    let (units, _) = chain.unit_vectors();
    let dense: Vec<Array2<f64>> = units
        .rows()
        .into_iter()
        .map(|v| {
            let v2 = v.to_owned().insert_axis(ndarray::Axis(1));
            Array2::<f64>::eye(d) - 2.0 * v2.dot(&v2.t())
        })
        .collect();
    let z = Array1::from_shape_fn(d, |_| rng.random_range(-1.0f64..1.0));
    let reps = 5;
    let naive = best_of(reps, || {
        let mut out = z.clone();
        for h in dense.iter().rev() {
            out = h.dot(&out);
        }
        out
    });
    let vector = best_of(reps, || chain.apply(z.view()));
    let speedup = naive.as_secs_f64() / vector.as_secs_f64().max(1e-9);
    outcome(
        worst <= FAST_PATH_TOL && speedup >= MIN_SPEEDUP,
        format!("max elementwise diff {worst:.2e} (bound {FAST_PATH_TOL:e}); speedup at d=n=300 {speedup:.1}x (need {MIN_SPEEDUP}x)"),
    )
}

fn best_of<T>(reps: usize, mut f: impl FnMut() -> T) -> Duration {
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed()
        })
        .min()
        .unwrap()
}

fn perturbed(model: &AlignmentModel, block: usize, (r, c): (usize, usize), h: f64) -> AlignmentModel {
    let mut m = model.clone();
    match block {
        0 => m.src_adapter.weight[[r, c]] += h,
        1 => m.tgt_adapter.weight[[r, c]] += h,
        2 | 3 => {
            let chain = if block == 2 { &mut m.src_chain } else { &mut m.tgt_chain };
            let mut raw = chain.raw().to_owned();
            raw[[r, c]] += h;
            *chain = HouseholderChain::new(raw).unwrap();
        }
        _ => unreachable!(),
    }
    m
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, n, vocab) = (8, 8, 12);
    let activations = [Activation::Linear, Activation::Tanh, Activation::Sigmoid];
    let mut worst = 0.0f64;
    for inst in 0..20 {
        let src = table("s", unit_rows(vocab, d, &mut rng));
        let tgt = table("t", unit_rows(vocab, d, &mut rng));
        let sc = build_contextual_table(&src, 0.3, None).unwrap();
        let tc = build_contextual_table(&tgt, 0.3, None).unwrap();
        let tables = Tables { src: &src, src_ctx: &sc, tgt: &tgt, tgt_ctx: &tc };
        let mut model = AlignmentModel::init(d, n, activations[inst % 3], &mut rng);
        model.src_adapter.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        model.tgt_adapter.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));

        let mut sources: Vec<usize> = (0..vocab).collect();
        rand::seq::SliceRandom::shuffle(sources.as_mut_slice(), &mut rng);
        let batch: Vec<(usize, usize)> =
            sources[..3].iter().map(|&s| (s, rng.random_range(0..vocab))).collect();
        let lex = SeedLexicon::from_pairs(batch.iter().copied());
        let index = build_index(&model, &tables, 3).unwrap();
        let negs = sample_negatives_with_index(&index, &lex, 2, 2, None, &mut rng).unwrap();
        let pen = index.penalties();
        let weights = LossWeights { lambda1: rng.random_range(0.5..2.5), lambda2: rng.random_range(0.001..0.1) };

        let grads = gradients(&model, &tables, &batch, &negs, &pen, weights).unwrap();
        for b in 0..4 {
            let shape = grads.blocks[b].dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let plus = total_loss(&perturbed(&model, b, (r, c), FD_STEP), &tables, &batch, &negs, &pen, weights).unwrap();
                    let minus = total_loss(&perturbed(&model, b, (r, c), -FD_STEP), &tables, &batch, &negs, &pen, weights).unwrap();
                    let numeric = (plus - minus) / (2.0 * FD_STEP);
                    let analytic = grads.blocks[b][[r, c]];
                    let denom = analytic.abs().max(numeric.abs()).max(FD_FLOOR);
                    worst = worst.max((analytic - numeric).abs() / denom);
                }
            }
        }
    }
    outcome(
        worst <= FD_REL_TOL,
        format!("max relative error {worst:.2e} over 20 instances (bound {FD_REL_TOL:e})"),
    )
}

fn loss_anchors() -> Outcome {
    // equal margins: positive and negative share score and penalty
    let x = array![0.6, 0.8];
    let y = array![1.0, 0.0];
    let negs = array![[1.0, 0.0], [1.0, 0.0]];
    let equal = rank_loss(x.view(), y.view(), negs.view(), 0.2, 0.3, &[0.3, 0.3]);
    let ln2_err = (equal - std::f64::consts::LN_2).abs();

    // ranking term saturated to zero and λ1 = 0 leave only 2λ2θ
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 5;
    let src = table("s", unit_rows(6, d, &mut rng));
    let tgt = table("t", unit_rows(6, d, &mut rng));
    let sc = build_contextual_table(&src, 0.9, None).unwrap();
    let tc = build_contextual_table(&tgt, 0.9, None).unwrap();
    let tables = Tables { src: &src, src_ctx: &sc, tgt: &tgt, tgt_ctx: &tc };
    let mut model = AlignmentModel::init(d, d, Activation::Tanh, &mut rng);
    model.src_adapter.weight.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    model.tgt_adapter.weight.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    let negatives = NegativeSet::from_map(BTreeMap::from([(0, Negatives::new(vec![1], vec![]))]));
    let mut r_tgt = Array1::zeros(6);
    r_tgt[1] = 1e6;
    let pen = Penalties { r_src: Array1::zeros(6), r_tgt };
    let lambda2 = 0.05;
    let grads = gradients(&model, &tables, &[(0, 0)], &negatives, &pen, LossWeights { lambda1: 0.0, lambda2 }).unwrap();
    let exact = grads
        .blocks
        .iter()
        .zip(model.blocks())
        .all(|(g, theta)| g.iter().zip(theta.iter()).all(|(&g, &t)| g == 2.0 * lambda2 * t));

    let e1 = array![1.0, 0.0, 0.0];
    let dist = mse_loss(e1.view(), (-&e1).view());
    outcome(
        ln2_err <= LN2_TOL && exact && dist == 2.0,
        format!("|L−ln2| {ln2_err:.1e}; λ2-only gradient exact: {exact}; distance(e1,−e1) = {dist}"),
    )
}

/// Full CSLS ranking by explicit loops and sorting.
fn brute_force_top(xs: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>, k: usize, src: usize, top: usize) -> Vec<usize> {
    let dot = |a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>| {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    };
    let mean_top = |mut v: Vec<f64>| {
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v[..k].iter().sum::<f64>() / k as f64
    };
    let r_x = mean_top(ys.rows().into_iter().map(|y| dot(xs.row(src), y)).collect());
    let mut scored: Vec<(usize, f64)> = ys
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, y)| {
            let r_y = mean_top(xs.rows().into_iter().map(|x| dot(x, y)).collect());
            (j, 2.0 * dot(xs.row(src), y) - r_x - r_y)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(top).map(|(j, _)| j).collect()
}

fn csls_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 10;
    let mut mismatches = 0;
    let mut queries = 0;
    for _ in 0..50 {
        let d = rng.random_range(4..=16);
        let (ns, nt) = (rng.random_range(k..=100), rng.random_range(k..=100));
        let src = table("s", unit_rows(ns, d, &mut rng));
        let tgt = table("t", unit_rows(nt, d, &mut rng));
        let sc = build_contextual_table(&src, 0.7, None).unwrap();
        let tc = build_contextual_table(&tgt, 0.7, None).unwrap();
        let tables = Tables { src: &src, src_ctx: &sc, tgt: &tgt, tgt_ctx: &tc };
        let mut model = AlignmentModel::init(d, d, Activation::Tanh, &mut rng);
        model.src_adapter.weight.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        let index = build_index(&model, &tables, k).unwrap();
        for s in 0..ns {
            let got: Vec<usize> = index.top_k(s, k).unwrap().into_iter().map(|(j, _)| j).collect();
            let want = brute_force_top(index.mapped_src(), index.mapped_tgt(), k, s, k);
            queries += 1;
            mismatches += usize::from(got != want);
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of {queries} top-{k} lists differ from the brute-force oracle"),
    )
}

fn synth_files(dir: &Path, spec: &SynthSpec) -> SynthFiles {
    generate(spec).unwrap().write(dir).unwrap()
}

fn run_config(files: &SynthFiles, out: &Path, train: TrainConfig) -> RunConfig {
    RunConfig {
        src_vec: Some(files.src_vec.clone()),
        tgt_vec: Some(files.tgt_vec.clone()),
        train_dict: Some(files.train_dict.clone()),
        test_dict: Some(files.test_dict.clone()),
        out_dir: Some(out.to_path_buf()),
        width: NumericWidth::Double,
        reproducible: true,
        train,
        ..RunConfig::default()
    }
}

// All seed pairs train; a held-out slice of 200 pairs saturates at P@1 = 1
// within a few epochs and stops training early.
fn supervised_config() -> TrainConfig {
    TrainConfig {
        self_learning: false,
        iterations: 1,
        val_fraction: 0.0,
        ..TrainConfig::default()
    }
}

fn supervised_recovery() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let files = synth_files(&dir.path().join("data"), &SynthSpec::default());
    let (_, baseline) =
        cmd_procrustes(&files.src_vec, &files.tgt_vec, &files.train_dict, &files.test_dict, 200_000, 10).unwrap();
    let base_p1 = baseline.get(1).unwrap();
    let run = cmd_train(&run_config(&files, &dir.path().join("run"), supervised_config())).unwrap();
    let p1 = run.report.unwrap().get(1).unwrap();
    outcome(
        p1 >= SUP_MIN_P1 && p1 >= base_p1 - BASELINE_SLACK,
        format!("test P@1 {p1:.3} (need ≥ {SUP_MIN_P1}); orthogonal baseline {base_p1:.3}"),
    )
}

/// Records the model and the new pairs of every augmentation round.
#[derive(Default)]
struct AugmentLog {
    previous: Option<SeedLexicon>,
    rounds: Vec<(AlignmentModel, Vec<(usize, usize)>)>,
}

impl TrainObserver for AugmentLog {
    fn on_augment(&mut self, _iteration: usize, model: &AlignmentModel, augmented: &SeedLexicon) {
        let fresh = augmented
            .pairs()
            .iter()
            .copied()
            .filter(|&(s, t)| !self.previous.as_ref().is_some_and(|p| p.contains(s, t)))
            .collect();
        self.rounds.push((model.clone(), fresh));
        self.previous = Some(augmented.clone());
    }
}

/// Brute-force CSLS scores between every pool source and pool target.
fn brute_force_scores(xs: &Array2<f64>, ys: &Array2<f64>, k: usize) -> Array2<f64> {
    let (ns, nt) = (xs.nrows(), ys.nrows());
    let cos = Array2::from_shape_fn((ns, nt), |(i, j)| {
        (0..xs.ncols()).map(|c| xs[[i, c]] * ys[[j, c]]).sum::<f64>()
    });
    let mean_top = |mut v: Vec<f64>| {
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v[..k].iter().sum::<f64>() / k as f64
    };
    let r_src: Vec<f64> = (0..ns).map(|i| mean_top(cos.row(i).to_vec())).collect();
    let r_tgt: Vec<f64> = (0..nt).map(|j| mean_top(cos.column(j).to_vec())).collect();
    Array2::from_shape_fn((ns, nt), |(i, j)| 2.0 * cos[[i, j]] - r_src[i] - r_tgt[j])
}

/// Whether `t` is the best target of `s` and `s` the best source of `t`,
/// ties going to the lower index.
fn is_mutual_argmax(scores: &Array2<f64>, s: usize, t: usize) -> bool {
    let argmax = |v: ndarray::ArrayView1<'_, f64>| (1..v.len()).fold(0, |b, c| if v[c] > v[b] { c } else { b });
    argmax(scores.row(s)) == t && argmax(scores.column(t)) == s
}

fn self_learning() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { noise_sigma: 0.05, seed_pairs: 50, ..SynthSpec::default() };
    let files = synth_files(&dir.path().join("data"), &spec);

    let sup = cmd_train(&run_config(&files, &dir.path().join("sup"), supervised_config())).unwrap();
    let sup_p1 = sup.report.unwrap().get(1).unwrap();

    let semi_cfg = TrainConfig { self_learning: true, iterations: 5, val_fraction: 0.0, ..TrainConfig::default() };
    let mut cfg = run_config(&files, &dir.path().join("semi"), semi_cfg.clone());
    cfg.reproducible = false;
    let mut log = AugmentLog::default();
    let semi = cmd_train_observed(&cfg, &mut log).unwrap();
    let semi_p1 = semi.report.unwrap().get(1).unwrap();

    let mut sizes = semi.outcome.dict_sizes.clone();
    sizes.push(semi.outcome.lexicon.len());
    let monotone = sizes.windows(2).all(|w| w[0] <= w[1]);

    // re-verify every pair the augmentation introduced
    let prep = |p: &Path, tau: f64| -> PreparedSide {
        prepare_side(p, cfg.max_vocab, cfg.width, tau, semi_cfg.max_neighbors).unwrap()
    };
    let src = prep(&files.src_vec, semi_cfg.tau_src);
    let tgt = prep(&files.tgt_vec, semi_cfg.tau_tgt);
    let pool_s: Vec<usize> = (0..semi_cfg.augment_pool.min(src.table.len())).collect();
    let pool_t: Vec<usize> = (0..semi_cfg.augment_pool.min(tgt.table.len())).collect();
    let k = semi_cfg.csls_k.min(pool_s.len()).min(pool_t.len());
    let mut checked = 0;
    let mut violations = 0;
    for (model, fresh) in &log.rounds {
        let xs = model.forward_map(Side::Source, &pool_s, &src.table, &src.ctx).unwrap();
        let ys = model.forward_map(Side::Target, &pool_t, &tgt.table, &tgt.ctx).unwrap();
        let scores = brute_force_scores(&xs, &ys, k);
        for &(s, t) in fresh {
            checked += 1;
            violations += usize::from(!is_mutual_argmax(&scores, s, t));
        }
    }

    let pass = monotone && semi_p1 >= sup_p1 - BASELINE_SLACK && violations == 0 && !log.rounds.is_empty();
    outcome(
        pass,
        format!(
            "dictionary sizes {sizes:?}; P@1 self-learning {semi_p1:.3} vs supervised {sup_p1:.3}; {violations} of {checked} augmented pairs fail the mutual-argmax check"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let files = synth_files(&dir.path().join("data"), &SynthSpec::default());
    let a = cmd_train(&run_config(&files, &dir.path().join("a"), supervised_config())).unwrap();
    let b = cmd_train(&run_config(&files, &dir.path().join("b"), supervised_config())).unwrap();
    let ha = fs::read(&a.artifacts.history).unwrap();
    let hb = fs::read(&b.artifacts.history).unwrap();
    let ca = fs::read(&a.artifacts.checkpoint).unwrap();
    let cb = fs::read(&b.artifacts.checkpoint).unwrap();
    outcome(
        ha == hb && !ha.is_empty(),
        format!(
            "history files {} bytes, identical: {}; checkpoints identical: {}",
            ha.len(),
            ha == hb,
            ca == cb
        ),
    )
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_norm = 0.0f64;
    let mut worst_mean = 0.0f64;
    for _ in 0..5 {
        let offset: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = Array2::from_shape_fn((1000, 50), |(_, c)| offset[c] + rng.random_range(-1.0..1.0));
        let (centered, out) = normalize_stages(&table("w", m)).unwrap();
        for r in out.vectors().rows() {
            worst_norm = worst_norm.max((r.dot(&r).sqrt() - 1.0).abs());
        }
        let means = centered.mean_axis(ndarray::Axis(0)).unwrap();
        worst_mean = worst_mean.max(means.iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    outcome(
        worst_norm <= NORM_TOL && worst_mean <= MEAN_TOL,
        format!("max |‖row‖−1| {worst_norm:.1e} (bound {NORM_TOL:e}); max |column mean| {worst_mean:.1e} (bound {MEAN_TOL:e})"),
    )
}

