//! Acceptance gate: eight independent checks covering gradient exactness,
//! the meta-update algebra, divergence scoring, curriculum ordering, BLEU,
//! the end-to-end adaptation protocol, difficulty buckets, and bit-level
//! reproducibility. Each test prints one `[PASS]`/`[FAIL]` line; tolerances
//! are pinned in the assertions. Expect the full binary to take a few
//! minutes: two of the checks drive whole pipelines.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see every line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use mclearn_cli::config::effective_config;
use mclearn_cli::stages::DomainsManifest;
use mclearn_cli::{run_all, Overrides, RunConfig, RunDir};
use mclearn_core::corpus::{SentencePair, Vocabulary, EOS};
use mclearn_core::curriculum::{CurriculumConfig, CurriculumSchedule};
use mclearn_core::eval::{corpus_bleu, SystemEval};
use mclearn_core::metatrain::{
    fomaml_outer_grad, inner_adapt, meta_train, MetaConfig, MetaTask, TaskSource,
};
use mclearn_core::model::{
    backward, central_diff_grad, forward_loss, max_relative_error, Batch, Layout, ModelConfig,
    ModelKind, OptKind, ParamVector, TensorSpec,
};
use mclearn_core::scoring::{
    divergence, finetune_lm, score_corpus, train_lm, LmHandle, LmTrainOptions, ScoredSentence,
};
use mclearn_core::seed::rng_for;
use mclearn_core::synth::{gen_synthetic, SyntheticConfig};
use mclearn_core::Result as CoreResult;
use rand::seq::SliceRandom;
use rand::Rng;

/// Prints the verdict line, then enforces it.
fn verdict(criterion: &str, pass: bool, detail: String) {
    println!("[{}] {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients vs central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradients_match_finite_differences() {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let t0 = Instant::now();

    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_hidden: 12,
        max_len: 8,
        vocab_size: 9,
        dropout: 0.0,
    };
    let lm_batch = Batch::for_lm(&[vec![4, 5, 6, 4], vec![7, 8]], cfg.max_len).unwrap();
    let tr_batch = Batch::for_translation(
        &[(vec![4, 5, 6], vec![6, 5]), (vec![7, 8, 4, 5], vec![8, 7, 4])],
        cfg.max_len,
    )
    .unwrap();

    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        for (kind, batch) in [(ModelKind::Lm, &lm_batch), (ModelKind::Translator, &tr_batch)] {
            let mut params = ParamVector::<f64>::init_random(&cfg, kind, seed);
            backward(&mut params, &cfg, batch, kind, None).unwrap();
            let analytic = params.grad().to_vec();

            let layout = params.layout().clone();
            let theta = params.data_as_f64();
            let loss_at = |t: &[f64]| -> f64 {
                let p = ParamVector::<f64>::from_f64_data(layout.clone(), t).unwrap();
                forward_loss(&p, &cfg, batch, kind, None).unwrap().loss
            };
            let numeric = central_diff_grad(loss_at, &theta, H);
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "criterion 1 gradient check",
        worst < TOL && secs < 120.0,
        format!("max relative error {worst:.3e} over 10 seeds x 2 models in {secs:.1}s (tol {TOL:.0e}, budget 120s)"),
    );
}

// ---------------------------------------------------------------------------
// 2. Meta-update algebra on quadratic families.
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct QuadN {
    a_s: Vec<f64>,
    c_s: Vec<f64>,
    a_q: Vec<f64>,
    c_q: Vec<f64>,
    id: u32,
}

fn quad_layout(n: usize) -> std::sync::Arc<Layout> {
    std::sync::Arc::new(Layout::from_specs(vec![TensorSpec {
        name: "theta".into(),
        shape: vec![n],
        offset: 0,
    }]))
}

fn eval_diag(a: &[f64], c: &[f64], params: &mut ParamVector<f64>) -> f64 {
    let mut loss = 0.0;
    for i in 0..a.len() {
        let theta = params.data()[i];
        params.grad_mut()[i] = a[i] * (theta - c[i]);
        loss += 0.5 * a[i] * (theta - c[i]) * (theta - c[i]);
    }
    loss
}

impl MetaTask<f64> for QuadN {
    fn support_grad(&mut self, params: &mut ParamVector<f64>) -> CoreResult<f64> {
        Ok(eval_diag(&self.a_s, &self.c_s, params))
    }
    fn query_grad(&mut self, params: &mut ParamVector<f64>) -> CoreResult<f64> {
        Ok(eval_diag(&self.a_q, &self.c_q, params))
    }
    fn id(&self) -> u32 {
        self.id
    }
    fn domain(&self) -> &str {
        "quad"
    }
    fn mean_divergence(&self) -> f64 {
        0.0
    }
}

struct OneShot(Vec<QuadN>);

impl TaskSource<f64> for OneShot {
    type Task = QuadN;
    fn meta_steps(&self) -> usize {
        1
    }
    fn tasks_for_step(&mut self, _: usize) -> CoreResult<Vec<QuadN>> {
        Ok(self.0.clone())
    }
}

fn sgd(alpha: f64, beta: f64) -> MetaConfig {
    MetaConfig {
        inner_lr: alpha,
        outer_lr: beta,
        inner_steps: 1,
        inner_opt: OptKind::Sgd,
        outer_opt: OptKind::Sgd,
        clip_norm: 1e12,
    }
}

#[test]
fn criterion_2_meta_update_matches_closed_forms() {
    const TOL_CHAIN: f64 = 1e-12;
    const TOL_DISC: f64 = 1e-10;
    let mut worst_chain = 0.0f64;
    let mut worst_disc = 0.0f64;

    // Scalar chain: θ=0 → θ′=0.5 → outer gradient −1.5 → θ_new=0.15
    // with α=0.5, β=0.1 and SGD on both levels.
    {
        let cfg = sgd(0.5, 0.1);
        let mut task = QuadN {
            a_s: vec![1.0],
            c_s: vec![1.0],
            a_q: vec![1.0],
            c_q: vec![2.0],
            id: 0,
        };
        let mut params = ParamVector::<f64>::zeros(quad_layout(1));
        let (mut adapted, support_loss) = inner_adapt(&params, &mut task, &cfg).unwrap();
        worst_chain = worst_chain.max((adapted.data()[0] - 0.5).abs());
        worst_chain = worst_chain.max((support_loss - 0.5).abs());
        let (grad, query_loss) = fomaml_outer_grad(&mut adapted, &mut task).unwrap();
        worst_chain = worst_chain.max((grad[0] - (-1.5)).abs());
        worst_chain = worst_chain.max((query_loss - 1.125).abs());
        meta_train(&mut params, &mut OneShot(vec![task]), &cfg, |_, _| Ok(())).unwrap();
        worst_chain = worst_chain.max((params.data()[0] - 0.15).abs());
    }

    // Two-dimensional chain, hand-derived: α=0.25, β=0.05,
    // support a=(1,2) c=(1,−1), query a=(3,1) c=(2,0):
    // θ′=(0.25,−0.5), outer gradient (−5.25,−0.5), θ_new=(0.2625,0.025).
    {
        let cfg = sgd(0.25, 0.05);
        let task = QuadN {
            a_s: vec![1.0, 2.0],
            c_s: vec![1.0, -1.0],
            a_q: vec![3.0, 1.0],
            c_q: vec![2.0, 0.0],
            id: 0,
        };
        let mut params = ParamVector::<f64>::zeros(quad_layout(2));
        let (mut adapted, _) = inner_adapt(&params, &mut task.clone(), &cfg).unwrap();
        worst_chain = worst_chain.max((adapted.data()[0] - 0.25).abs());
        worst_chain = worst_chain.max((adapted.data()[1] - (-0.5)).abs());
        let (grad, _) = fomaml_outer_grad(&mut adapted, &mut task.clone()).unwrap();
        worst_chain = worst_chain.max((grad[0] - (-5.25)).abs());
        worst_chain = worst_chain.max((grad[1] - (-0.5)).abs());
        meta_train(&mut params, &mut OneShot(vec![task]), &cfg, |_, _| Ok(())).unwrap();
        worst_chain = worst_chain.max((params.data()[0] - 0.2625).abs());
        worst_chain = worst_chain.max((params.data()[1] - 0.025).abs());
    }

    // First-order vs exact meta-gradient: with support ½A(θ−c_S)² and query
    // ½(θ−c_Q)², the exact gradient is (1−αA)(θ′−c_Q); the first-order
    // approximation keeps (θ′−c_Q), so the gap is exactly αA(θ′−c_Q).
    for &(a, alpha, theta0, c_s, c_q) in &[
        (1.0f64, 0.5f64, 0.0f64, 1.0f64, 2.0f64),
        (2.0, 0.25, -1.0, 0.5, 3.0),
        (0.7, 0.9, 2.0, -0.5, -2.0),
        (5.0, 0.05, -4.0, 1.5, -1.5),
    ] {
        let cfg = sgd(alpha, 0.1);
        let mut task = QuadN {
            a_s: vec![a],
            c_s: vec![c_s],
            a_q: vec![1.0],
            c_q: vec![c_q],
            id: 0,
        };
        let mut params = ParamVector::<f64>::zeros(quad_layout(1));
        params.data_mut()[0] = theta0;
        let (mut adapted, _) = inner_adapt(&params, &mut task, &cfg).unwrap();
        let theta_prime = adapted.data()[0];
        let (grad, _) = fomaml_outer_grad(&mut adapted, &mut task).unwrap();
        let exact = (1.0 - alpha * a) * (theta_prime - c_q);
        let gap = grad[0] - exact;
        worst_disc = worst_disc.max((gap - alpha * a * (theta_prime - c_q)).abs());
    }

    verdict(
        "criterion 2 meta-update oracle",
        worst_chain < TOL_CHAIN && worst_disc < TOL_DISC,
        format!("closed-form error {worst_chain:.2e} (tol {TOL_CHAIN:.0e}), first-vs-exact gap error {worst_disc:.2e} (tol {TOL_DISC:.0e})"),
    );
}

// ---------------------------------------------------------------------------
// 3. Neural divergence ranking vs a count-based bigram oracle.
// ---------------------------------------------------------------------------

struct Bigram {
    counts: Vec<Vec<f64>>,
    totals: Vec<f64>,
    v: usize,
}

impl Bigram {
    fn fit(sentences: &[Vec<u32>], v: usize) -> Self {
        let mut counts = vec![vec![0.0; v]; v + 1];
        let mut totals = vec![0.0; v + 1];
        for s in sentences {
            let mut prev = v;
            for &t in s {
                counts[prev][t as usize] += 1.0;
                totals[prev] += 1.0;
                prev = t as usize;
            }
            counts[prev][EOS as usize] += 1.0;
            totals[prev] += 1.0;
        }
        Bigram { counts, totals, v }
    }

    fn h(&self, s: &[u32]) -> f64 {
        let mut nll = 0.0;
        let mut prev = self.v;
        for &t in s.iter().chain(std::iter::once(&EOS)) {
            nll -= ((self.counts[prev][t as usize] + 1.0)
                / (self.totals[prev] + self.v as f64))
                .ln();
            prev = t as usize;
        }
        nll / (s.len() + 1) as f64
    }
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                out[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        cov += (ra[i] - mean) * (rb[i] - mean);
        va += (ra[i] - mean) * (ra[i] - mean);
        vb += (rb[i] - mean) * (rb[i] - mean);
    }
    cov / (va.sqrt() * vb.sqrt())
}

#[test]
fn criterion_3_divergence_ranking_matches_bigram_oracle() {
    const RHO_MIN: f64 = 0.9;
    let synth = SyntheticConfig {
        n_seen: 1,
        n_unseen: 1,
        common_tokens: 24,
        private_tokens: 8,
        general_sentences: 220,
        train_sentences: 150,
        test_sentences: 30,
        min_len: 4,
        max_len: 10,
        max_private_rate: 0.9,
        leak_rate: 0.04,
        zipf_exponent: 1.1,
        seed: 9,
    };
    let data = gen_synthetic(&synth).unwrap();
    let domain = &data.meta_train[0];
    let vocab = Vocabulary::build(&[&data.general, domain], 1);
    let enc = |c: &mclearn_core::corpus::DomainCorpus| -> Vec<Vec<u32>> {
        c.pairs.iter().map(|p| vocab.encode(&p.src)).collect()
    };
    let general_ids = enc(&data.general);
    let domain_ids = enc(domain);

    let lm_cfg = ModelConfig {
        n_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_hidden: 64,
        max_len: 16,
        vocab_size: vocab.len(),
        dropout: 0.0,
    };
    let opts = LmTrainOptions {
        lr: 1e-3,
        max_epochs: 30,
        batch_size: 16,
        patience: 3,
        seed: 101,
        ..Default::default()
    };
    let (general_lm, _) = train_lm::<f64>(&general_ids, &vocab, &lm_cfg, &opts).unwrap();
    let (domain_lm, _) = finetune_lm(
        &general_lm,
        &domain_ids,
        &LmTrainOptions {
            lr: 5e-4,
            seed: 102,
            ..opts
        },
    )
    .unwrap();

    let g_oracle = Bigram::fit(&general_ids, vocab.len());
    let d_oracle = Bigram::fit(&domain_ids, vocab.len());
    let pool: Vec<Vec<u32>> = domain_ids
        .iter()
        .take(60)
        .chain(general_ids.iter().take(60))
        .cloned()
        .collect();
    let neural: Vec<f64> = pool
        .iter()
        .map(|s| divergence(&general_lm, &domain_lm, s).unwrap())
        .collect();
    let oracle: Vec<f64> = pool.iter().map(|s| d_oracle.h(s) - g_oracle.h(s)).collect();
    let rho = spearman(&neural, &oracle);

    // Identical models must give exactly zero for every sentence.
    let twin = LmHandle {
        params: general_lm.params.clone(),
        cfg: general_lm.cfg.clone(),
        vocab: general_lm.vocab.clone(),
    };
    let mut lms = BTreeMap::new();
    lms.insert(domain.domain.clone(), twin);
    let scored = score_corpus(&general_lm, &lms, &[domain]).unwrap();
    let zero_exact = scored[&domain.domain].iter().all(|s| s.divergence == 0.0);

    verdict(
        "criterion 3 divergence oracle",
        rho > RHO_MIN && zero_exact,
        format!("Spearman rho {rho:.4} (need > {RHO_MIN}), identical-model divergence exactly zero: {zero_exact}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Curriculum ordering and the uniform baseline's step-independence.
// ---------------------------------------------------------------------------

fn synthetic_schedule(width: f64, steps: usize) -> CurriculumSchedule {
    let scored: Vec<ScoredSentence> = (0..300)
        .map(|i| {
            let d = (i + 1) as f64;
            ScoredSentence {
                pair: SentencePair {
                    id: i as u32,
                    src: vec!["w".into(); 4],
                    tgt: vec!["w".into(); 4],
                },
                h_general: 0.0,
                h_domain: d,
                divergence: d,
            }
        })
        .collect();
    let mut by_domain = BTreeMap::new();
    by_domain.insert("syn".to_string(), scored);
    CurriculumSchedule::new(
        CurriculumConfig {
            meta_steps: steps,
            tasks_per_step: 10,
            support_budget: 16,
            query_budget: 32,
            window_width: width,
        },
        by_domain,
        false,
    )
    .unwrap()
}

/// Two-sample Kolmogorov-Smirnov p-value (asymptotic, with the usual
/// small-sample correction). D = 0 is a perfect match, p = 1.
fn ks_p_value(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (sa.len(), sb.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < n && j < m {
        let x = sa[i].min(sb[j]);
        while i < n && sa[i] <= x {
            i += 1;
        }
        while j < m && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    if lambda < 1e-9 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn step_means(schedule: &CurriculumSchedule, step: usize, seed: u64) -> f64 {
    let tasks = schedule.assemble_tasks(step, seed).unwrap();
    tasks.iter().map(|t| t.mean_divergence).sum::<f64>() / tasks.len() as f64
}

#[test]
fn criterion_4_curriculum_is_monotone_and_uniform_is_step_free() {
    const P_MIN: f64 = 0.01;
    let steps = 5;
    // width 1/M: consecutive windows touch only at their endpoints.
    let schedule = synthetic_schedule(0.2, steps);

    let mut monotone = true;
    for seed in 0..100u64 {
        let means: Vec<f64> = (1..=steps).map(|m| step_means(&schedule, m, seed)).collect();
        if !means.windows(2).all(|w| w[1] > w[0]) {
            monotone = false;
        }
    }

    // The uniform baseline freezes task membership, so its per-step means are
    // identical by construction; the KS test across 100 seeds must accept.
    let mut uni_first = Vec::new();
    let mut uni_last = Vec::new();
    let mut cur_first = Vec::new();
    let mut cur_last = Vec::new();
    for seed in 0..100u64 {
        let tasks = schedule.uniform_tasks(seed).unwrap();
        let mean = tasks.iter().map(|t| t.mean_divergence).sum::<f64>() / tasks.len() as f64;
        uni_first.push(mean);
        uni_last.push(mean);
        cur_first.push(step_means(&schedule, 1, seed));
        cur_last.push(step_means(&schedule, steps, seed));
    }
    let p_uniform = ks_p_value(&uni_first, &uni_last);
    // Contrast showing the test has power: the curriculum's first and last
    // steps come from different distributions and must be rejected.
    let p_curriculum = ks_p_value(&cur_first, &cur_last);

    verdict(
        "criterion 4 curriculum ordering",
        monotone && p_uniform > P_MIN && p_curriculum < P_MIN,
        format!("per-step means strictly increasing over {steps} disjoint windows for 100 seeds: {monotone}; uniform KS p {p_uniform:.3} (> {P_MIN}), curriculum contrast p {p_curriculum:.2e} (< {P_MIN})"),
    );
}

// ---------------------------------------------------------------------------
// 5. BLEU hand cases and permutation invariance.
// ---------------------------------------------------------------------------

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn criterion_5_bleu_matches_hand_computations() {
    const TOL: f64 = 1e-9;

    let identity = corpus_bleu(
        &[toks("the cat sat"), toks("a long sentence here ok")],
        &[toks("the cat sat"), toks("a long sentence here ok")],
    )
    .unwrap();

    // Clipped unigrams 2/7 and zero matched bigrams force a zero score.
    let clipped = corpus_bleu(
        &[toks("the the the the the the the")],
        &[toks("the cat is on the mat")],
    )
    .unwrap();

    // Hypothesis of length 3 matching the reference prefix exactly: all
    // n-gram precisions are 1, so BLEU = 100 · e^(1 − 6/3) = 100/e.
    let brevity = corpus_bleu(&[toks("a b c")], &[toks("a b c d e f")]).unwrap();
    let brevity_expect = 100.0 * (-1.0f64).exp();

    let mut rng = rng_for(77, &[]);
    let words = ["kit", "fox", "den", "oak", "fen", "aye"];
    let base_pairs: Vec<(Vec<String>, Vec<String>)> = (0..20)
        .map(|_| {
            let n = rng.gen_range(3..9);
            let hyp: Vec<String> = (0..n).map(|_| words[rng.gen_range(0..6)].to_string()).collect();
            let m = rng.gen_range(3..9);
            let rf: Vec<String> = (0..m).map(|_| words[rng.gen_range(0..6)].to_string()).collect();
            (hyp, rf)
        })
        .collect();
    let hyps: Vec<Vec<String>> = base_pairs.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<Vec<String>> = base_pairs.iter().map(|p| p.1.clone()).collect();
    let base = corpus_bleu(&hyps, &refs).unwrap();
    let mut max_shuffle_err = 0.0f64;
    for shuffle in 0..50 {
        let mut order: Vec<usize> = (0..hyps.len()).collect();
        order.shuffle(&mut rng_for(1000 + shuffle, &[]));
        let h: Vec<Vec<String>> = order.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<Vec<String>> = order.iter().map(|&i| refs[i].clone()).collect();
        max_shuffle_err = max_shuffle_err.max((corpus_bleu(&h, &r).unwrap() - base).abs());
    }

    let pass = identity == 100.0
        && clipped == 0.0
        && (brevity - brevity_expect).abs() < TOL
        && max_shuffle_err < TOL;
    verdict(
        "criterion 5 BLEU hand cases",
        pass,
        format!("identity {identity}, clipped-zero {clipped}, brevity {brevity:.9} vs {brevity_expect:.9}, shuffle drift {max_shuffle_err:.2e} over 50 permutations"),
    );
}

// ---------------------------------------------------------------------------
// 6 & 7. Full pipeline across three seeds, shared between the two checks.
// ---------------------------------------------------------------------------

struct E2eRuns {
    dirs: Vec<(u64, tempfile::TempDir)>,
    wall_secs: f64,
}

static E2E: OnceLock<E2eRuns> = OnceLock::new();

fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn e2e_runs() -> &'static E2eRuns {
    E2E.get_or_init(|| {
        let t0 = Instant::now();
        let mut dirs = Vec::new();
        for seed in [1u64, 2, 3] {
            let cfg = effective_config(
                Some(&desk_config_path()),
                &Overrides {
                    seed: Some(seed),
                    ..Default::default()
                },
            )
            .unwrap();
            let tmp = tempfile::tempdir().unwrap();
            let dir = RunDir::at(tmp.path());
            run_all(&dir, &cfg, false).unwrap();
            dirs.push((seed, tmp));
        }
        E2eRuns {
            dirs,
            wall_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

fn load_eval(dir: &Path, system: &str) -> SystemEval {
    let path = RunDir::at(dir).system_eval(system);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

#[test]
fn criterion_6_adaptation_protocol_trend() {
    let runs = e2e_runs();

    // Seed-averaged BLEU per system and domain.
    let systems = [
        "vanilla",
        "traditional-ft",
        "meta-mt-woft",
        "meta-mt",
        "meta-curriculum-woft",
        "meta-curriculum",
    ];
    let mut avg: BTreeMap<&str, BTreeMap<String, f64>> = BTreeMap::new();
    for sys in systems {
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        for (_, tmp) in &runs.dirs {
            for (domain, bleu) in load_eval(tmp.path(), sys).bleu {
                *acc.entry(domain).or_default() += bleu;
            }
        }
        for v in acc.values_mut() {
            *v /= runs.dirs.len() as f64;
        }
        avg.insert(sys, acc);
    }

    let manifest = DomainsManifest::load(&RunDir::at(runs.dirs[0].1.path())).unwrap();
    let unseen: Vec<String> = manifest
        .domains
        .iter()
        .filter(|d| !d.seen)
        .map(|d| d.name.clone())
        .collect();
    let seen: Vec<String> = manifest.seen().map(|d| d.name.clone()).collect();
    let mean_over = |sys: &str, names: &[String]| -> f64 {
        names.iter().map(|n| avg[sys][n]).sum::<f64>() / names.len() as f64
    };

    // (a) curriculum post-adaptation beats plain fine-tuning on >= 4/5 unseen.
    let wins = unseen
        .iter()
        .filter(|d| avg["meta-curriculum"][*d] >= avg["traditional-ft"][*d])
        .count();

    // (b) curriculum improvement >= uniform meta improvement, unseen average.
    let delta_mc = mean_over("meta-curriculum", &unseen) - mean_over("meta-curriculum-woft", &unseen);
    let delta_mm = mean_over("meta-mt", &unseen) - mean_over("meta-mt-woft", &unseen);

    // (c) both meta systems beat the unadapted baseline on the seen average
    // before any fine-tuning.
    let vanilla_seen = mean_over("vanilla", &seen);
    let mm_woft_seen = mean_over("meta-mt-woft", &seen);
    let mc_woft_seen = mean_over("meta-curriculum-woft", &seen);

    let pass = wins >= 4
        && delta_mc >= delta_mm - 1e-9
        && mm_woft_seen > vanilla_seen
        && mc_woft_seen > vanilla_seen
        && runs.wall_secs < 1800.0;
    verdict(
        "criterion 6 protocol trend",
        pass,
        format!(
            "unseen wins {wins}/5; unseen delta curriculum {delta_mc:.2} vs uniform {delta_mm:.2}; seen w/o-FT {mm_woft_seen:.1}/{mc_woft_seen:.1} vs vanilla {vanilla_seen:.1}; 3 pipelines in {:.0}s (budget 1800s)",
            runs.wall_secs
        ),
    );
}

#[test]
fn criterion_7_difficulty_buckets_trend() {
    let runs = e2e_runs();
    let domain = "dom-u1";
    let mut passing_seeds = 0;
    let mut detail = Vec::new();
    for (seed, tmp) in &runs.dirs {
        let path = RunDir::at(tmp.path()).buckets_json();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let tiers: Vec<f64> = v[domain]["difficulty"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| b["bleu"].as_f64().expect("empty difficulty bucket"))
            .collect();
        assert_eq!(tiers.len(), 3);
        let ok = tiers[0] >= tiers[1] - 1e-9 && tiers[1] >= tiers[2] - 1e-9;
        if ok {
            passing_seeds += 1;
        }
        detail.push(format!(
            "seed {seed}: {:.1}/{:.1}/{:.1}{}",
            tiers[0],
            tiers[1],
            tiers[2],
            if ok { "" } else { " (not monotone)" }
        ));
    }
    verdict(
        "criterion 7 difficulty buckets",
        passing_seeds >= 2,
        format!("easy/medium/hard BLEU non-increasing on {domain} in {passing_seeds}/3 seeds ({})", detail.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 8. Bit-identical reruns.
// ---------------------------------------------------------------------------

fn collect_files(root: &Path) -> BTreeMap<String, PathBuf> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, path);
            }
        }
    }
    out
}

/// Drops the final (wall-time) column from every row.
fn strip_last_column(text: &str) -> String {
    text.lines()
        .map(|l| match l.rfind('\t') {
            Some(i) => &l[..i],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_8_reruns_are_bit_identical() {
    let mut cfg = RunConfig::from_file(&desk_config_path()).unwrap();
    cfg.seed = 11;
    cfg.synth.general_sentences = 240;
    cfg.synth.train_sentences = 180;
    cfg.synth.test_sentences = 120;
    cfg.pretrain.max_epochs = 6;
    cfg.lm.max_epochs = 8;
    cfg.curriculum.meta_steps = 6;
    cfg.curriculum.tasks_per_step = 6;
    cfg.curriculum.support_tokens = 120;
    cfg.curriculum.query_tokens = 240;
    cfg.finetune.epochs = 5;
    cfg.eval.beam = 3;
    cfg.finalize();
    cfg.validate().unwrap();

    let run = |cfg: &RunConfig| -> tempfile::TempDir {
        let tmp = tempfile::tempdir().unwrap();
        run_all(&RunDir::at(tmp.path()), cfg, false).unwrap();
        tmp
    };
    let first = run(&cfg);
    let second = run(&cfg);

    let a = collect_files(first.path());
    let b = collect_files(second.path());
    let mut mismatches: Vec<String> = Vec::new();
    if a.keys().collect::<Vec<_>>() != b.keys().collect::<Vec<_>>() {
        mismatches.push("file inventories differ".to_string());
    } else {
        for (rel, pa) in &a {
            let (ba, bb) = (std::fs::read(pa).unwrap(), std::fs::read(&b[rel]).unwrap());
            let equal = if rel.ends_with("train_log.tsv") {
                strip_last_column(&String::from_utf8(ba).unwrap())
                    == strip_last_column(&String::from_utf8(bb).unwrap())
            } else {
                ba == bb
            };
            if !equal {
                mismatches.push(rel.clone());
            }
        }
    }
    verdict(
        "criterion 8 determinism",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} artifacts byte-identical across two runs (wall-time column excluded from training logs)", a.len())
        } else {
            format!("differing artifacts: {}", mismatches.join(", "))
        },
    );
}
