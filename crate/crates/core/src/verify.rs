//! Randomized property suite over every module.
//!
//! Every instance is drawn from `(seed, property, trial)`, so a failure can be
//! replayed from the seed alone. The Procrustes solver is a parameter so a
//! deliberately broken solver can be shown to fail the optimality checks.

use rand::Rng;

use crate::adapter::{
    delta_w, grad_a, init_adapter, local_update, AdapterConfig, AdapterState, InitScheme,
};
use crate::baselines::{
    aggregation_error, federa_aggregate, fedex_aggregate, fedsa_aggregate, ffa_aggregate,
    lora_grads, mean_product, LoraState, SchemeId,
};
use crate::error::Result;
use crate::federation::comm::{downlink_params, uplink_params, LayerDims};
use crate::federation::metrics::RoundMetrics;
use crate::federation::partition::dirichlet_partition;
use crate::federation::{run_experiment_with, ExperimentConfig, Simulation, TaskKind, TaskSpec};
use crate::linalg::{
    default_psd_tol, orthonormal_columns, orthonormal_columns_from, orthonormality_defect, sym_eig,
    thin_svd, Matrix,
};
use crate::parallel::Execution;
use crate::rng::{derive, rng_for, stream, SimRng};
use crate::server::{
    aggregate_gram, align_with, alignment_objective, alignment_residual, decompose,
    procrustes_align, size_weights, truncate_factor, uniform_weights, CanonicalFactor,
    ProcrustesResult,
};

pub type Aligner = fn(&Matrix, &CanonicalFactor) -> Result<ProcrustesResult>;

/// Step of the five-point stencil. The losses checked here are polynomials
/// of degree at most four along any coordinate, where the stencil is exact,
/// so the step only has to keep round-off small.
pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Fewer and smaller instances.
    pub quick: bool,
    pub aligner: Aligner,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            quick: false,
            aligner: procrustes_align,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Ctx<'a> {
    opts: &'a VerifyOptions,
    tag: u64,
}

impl Ctx<'_> {
    fn trials(&self, full: usize, quick: usize) -> usize {
        if self.opts.quick {
            quick
        } else {
            full
        }
    }

    fn rng(&self, trial: usize) -> SimRng {
        rng_for(
            derive(self.opts.seed, self.tag, trial as u64),
            stream::VERIFY,
        )
    }
}

type Check = fn(&Ctx) -> Result<Report>;

pub const PROPERTY_NAMES: [&str; 23] = [
    "linalg.orthonormal_columns",
    "linalg.sym_eig",
    "linalg.thin_svd",
    "linalg.matmul_determinism",
    "adapter.gradient_check",
    "adapter.frozen_state",
    "adapter.quadratic_homogeneity",
    "adapter.init",
    "server.aggregation_exactness",
    "server.gram_preservation",
    "server.procrustes_optimality",
    "server.rank_bound",
    "server.delta_proc",
    "baselines.gradient_check",
    "baselines.fedex_exactness",
    "baselines.federa_optimality",
    "baselines.locality",
    "baselines.aggregation_error",
    "federation.reproducibility",
    "federation.data_conservation",
    "federation.scheme_independence",
    "federation.bias_freedom",
    "federation.communication_ordering",
];

const CHECKS: [Check; 23] = [
    linalg_orthonormal_columns,
    linalg_sym_eig,
    linalg_thin_svd,
    linalg_matmul_determinism,
    adapter_gradient_check,
    adapter_frozen_state,
    adapter_homogeneity,
    adapter_init,
    server_aggregation_exactness,
    server_gram_preservation,
    server_procrustes_optimality,
    server_rank_bound,
    server_delta_proc,
    baselines_gradient_check,
    baselines_fedex_exactness,
    baselines_federa_optimality,
    baselines_locality,
    baselines_aggregation_error,
    federation_reproducibility,
    federation_data_conservation,
    federation_scheme_independence,
    federation_bias_freedom,
    federation_communication_ordering,
];

pub fn run_all(opts: &VerifyOptions) -> Vec<PropertyOutcome> {
    PROPERTY_NAMES
        .iter()
        .filter_map(|name| run_property(name, opts))
        .collect()
}

/// `None` for an unknown name.
pub fn run_property(name: &str, opts: &VerifyOptions) -> Option<PropertyOutcome> {
    let idx = PROPERTY_NAMES.iter().position(|n| *n == name)?;
    let name = PROPERTY_NAMES[idx];
    let ctx = Ctx {
        opts,
        tag: name_tag(name),
    };
    Some(match CHECKS[idx](&ctx) {
        Ok(report) => PropertyOutcome {
            name,
            passed: report.passed(),
            detail: report.detail(),
        },
        Err(e) => PropertyOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    })
}

// FNV-1a, so instance streams do not move when properties are reordered
fn name_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Default)]
struct Report {
    parts: Vec<(bool, String)>,
}

impl Report {
    fn worst(&mut self, w: &Worst) {
        self.parts.push((w.ok(), w.describe()));
    }

    fn count(&mut self, label: &str, violations: usize, trials: usize) {
        self.parts.push((
            violations == 0,
            format!("{label}: {violations}/{trials} violations"),
        ));
    }

    fn note(&mut self, passed: bool, detail: String) {
        self.parts.push((passed, detail));
    }

    fn passed(&self) -> bool {
        self.parts.iter().all(|(p, _)| *p)
    }

    fn detail(&self) -> String {
        self.parts
            .iter()
            .map(|(_, d)| d.as_str())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Largest observed error against a limit. NaN sticks and fails.
struct Worst {
    label: &'static str,
    limit: f64,
    value: f64,
    trials: usize,
}

impl Worst {
    fn new(label: &'static str, limit: f64) -> Self {
        Worst {
            label,
            limit,
            value: 0.0,
            trials: 0,
        }
    }

    fn observe(&mut self, v: f64) {
        self.trials += 1;
        if self.value.is_nan() {
            return;
        }
        if v.is_nan() || v > self.value {
            self.value = v;
        }
    }

    fn ok(&self) -> bool {
        self.value <= self.limit
    }

    fn describe(&self) -> String {
        format!(
            "{} {:.3e} (limit {:.0e}, {} trials)",
            self.label, self.value, self.limit, self.trials
        )
    }
}

fn relative(err: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

fn gaussian(rng: &mut SimRng, rows: usize, cols: usize) -> Matrix {
    Matrix::gaussian(rows, cols, 1.0, rng)
}

fn same_bits(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Fourth-order central difference of `f` at 0.
pub fn five_point(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
}

fn entry_error(analytic: f64, numeric: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1e-8)
}

/// Worst entrywise relative error of `grad_a` against finite differences of
/// `½‖W⁰ + ΔW(A) − target‖²_F`.
pub fn grad_a_fd_error(state: &AdapterState, target: &Matrix) -> Result<f64> {
    let loss = |a: &Matrix| -> Result<f64> {
        Ok(0.5
            * state
                .w0()
                .add(&state.delta_w_for(a)?)?
                .sub(target)?
                .frobenius_norm_sq())
    };
    let g_full = state.w0().add(&delta_w(state))?.sub(target)?;
    let g = grad_a(state, &g_full)?;
    let mut worst: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let fd = five_point(
                |t| {
                    let mut a = state.a.clone();
                    a[(i, j)] += t;
                    loss(&a)
                },
                FD_STEP,
            )?;
            worst = worst.max(entry_error(g[(i, j)], fd));
        }
    }
    Ok(worst)
}

/// Same check for both LoRA factors of `½‖W⁰ + (α/r)·b·a − target‖²_F`.
pub fn lora_fd_error(state: &LoraState, target: &Matrix) -> Result<f64> {
    let loss = |b: &Matrix, a: &Matrix| -> Result<f64> {
        Ok(0.5
            * state
                .with_factors(b.clone(), a.clone())?
                .full_weight()
                .sub(target)?
                .frobenius_norm_sq())
    };
    let g_full = state.full_weight().sub(target)?;
    let (gb, ga) = lora_grads(state, &g_full)?;
    let mut worst: f64 = 0.0;
    for i in 0..gb.rows() {
        for j in 0..gb.cols() {
            let fd = five_point(
                |t| {
                    let mut b = state.b.clone();
                    b[(i, j)] += t;
                    loss(&b, &state.a)
                },
                FD_STEP,
            )?;
            worst = worst.max(entry_error(gb[(i, j)], fd));
        }
    }
    for i in 0..ga.rows() {
        for j in 0..ga.cols() {
            let fd = five_point(
                |t| {
                    let mut a = state.a.clone();
                    a[(i, j)] += t;
                    loss(&state.b, &a)
                },
                FD_STEP,
            )?;
            worst = worst.max(entry_error(ga[(i, j)], fd));
        }
    }
    Ok(worst)
}

fn random_scheme(rng: &mut SimRng) -> InitScheme {
    [
        InitScheme::SemiOrthogonal,
        InitScheme::Kaiming,
        InitScheme::Svd,
    ][rng.random_range(0..3)]
}

fn random_adapter(rng: &mut SimRng, max_dim: usize) -> Result<AdapterState> {
    let d_out = rng.random_range(1..=max_dim);
    let d_in = rng.random_range(1..=max_dim);
    let k = d_out.min(d_in);
    let config = AdapterConfig {
        d_out,
        d_in,
        rank: rng.random_range(1..=k),
        alpha: rng.random_range(0.5..16.0),
        init_scheme: random_scheme(rng),
        seed: rng.random(),
    };
    let w0 = Matrix::gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng);
    init_adapter(config, w0)
}

fn random_lora(rng: &mut SimRng, max_dim: usize) -> Result<LoraState> {
    let d_out = rng.random_range(1..=max_dim);
    let d_in = rng.random_range(1..=max_dim);
    let rank = rng.random_range(1..=d_out.min(d_in));
    let w0 = gaussian(rng, d_out, d_in);
    let b = gaussian(rng, d_out, rank);
    let a = gaussian(rng, rank, d_in);
    LoraState::from_parts(w0, b, a, rng.random_range(0.5..16.0))
}

/// Clients sharing `w0`, with independent factors.
fn random_lora_clients(
    rng: &mut SimRng,
    max_dim: usize,
    max_clients: usize,
) -> Result<Vec<LoraState>> {
    let first = random_lora(rng, max_dim)?;
    let n = rng.random_range(1..=max_clients);
    let mut states = vec![first.clone()];
    for _ in 1..n {
        let b = gaussian(rng, first.d_out(), first.rank());
        let a = gaussian(rng, first.rank(), first.d_in());
        states.push(first.with_factors(b, a)?);
    }
    Ok(states)
}

fn linalg_orthonormal_columns(ctx: &Ctx) -> Result<Report> {
    let mut defect = Worst::new("max ||MᵀM − I||", 1e-12);
    for t in 0..ctx.trials(500, 100) {
        let mut rng = ctx.rng(t);
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=rows);
        defect.observe(orthonormality_defect(&orthonormal_columns(
            rows,
            cols,
            rng.random(),
        )?));
    }
    let mut r = Report::default();
    r.worst(&defect);
    Ok(r)
}

fn linalg_sym_eig(ctx: &Ctx) -> Result<Report> {
    let mut recon = Worst::new("max relative reconstruction error", 1e-9);
    let mut ortho = Worst::new("max ||PPᵀ − I||", 1e-10);
    let (mut negative, mut unsorted) = (0, 0);
    let n = ctx.trials(500, 100);
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let m = rng.random_range(1..=16);
        let dim = rng.random_range(1..=16);
        let q = gaussian(&mut rng, m, dim).gram();
        let eig = sym_eig(&q, default_psd_tol(&q))?;
        recon.observe(relative(
            eig.reconstruct().distance(&q)?,
            q.frobenius_norm(),
        ));
        ortho.observe(orthonormality_defect(&eig.vectors.transpose()));
        negative += eig.values.iter().any(|&v| v < 0.0) as usize;
        unsorted += eig.values.windows(2).any(|w| w[0] < w[1]) as usize;
    }
    let mut r = Report::default();
    r.worst(&recon);
    r.worst(&ortho);
    r.count("negative eigenvalues", negative, n);
    r.count("unsorted eigenvalues", unsorted, n);
    Ok(r)
}

fn linalg_thin_svd(ctx: &Ctx) -> Result<Report> {
    let mut recon = Worst::new("max relative reconstruction error", 1e-9);
    let mut ortho = Worst::new("max orthonormality defect of u, v", 1e-10);
    let mut spectrum = Worst::new("max |σ − √λ(MᵀM)| / σ_max", 1e-8);
    let mut unsorted = 0;
    let n = ctx.trials(500, 100);
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=16);
        let p = rows.min(cols);
        let m = if p > 1 && rng.random_bool(0.3) {
            let inner = rng.random_range(1..p);
            gaussian(&mut rng, rows, inner).matmul(&gaussian(&mut rng, inner, cols))?
        } else {
            gaussian(&mut rng, rows, cols)
        };
        let svd = thin_svd(&m);
        recon.observe(relative(
            svd.reconstruct().distance(&m)?,
            m.frobenius_norm(),
        ));
        ortho.observe(orthonormality_defect(&svd.u).max(orthonormality_defect(&svd.v)));
        unsorted += svd.sigma.windows(2).any(|w| w[0] < w[1]) as usize
            + svd.sigma.iter().any(|&s| s < 0.0) as usize;
        let g = m.gram();
        let values = sym_eig(&g, default_psd_tol(&g))?.values;
        let top = svd.sigma.first().copied().unwrap_or(0.0);
        for (s, l) in svd.sigma.iter().zip(&values) {
            spectrum.observe(relative((s - l.sqrt()).abs(), top));
        }
    }
    let mut r = Report::default();
    r.worst(&recon);
    r.worst(&ortho);
    r.worst(&spectrum);
    r.count("unsorted or negative singular values", unsorted, n);
    Ok(r)
}

fn linalg_matmul_determinism(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(500, 100);
    let mut differ = 0;
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let (i, j, k) = (
            rng.random_range(1..=16),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
        );
        let a = gaussian(&mut rng, i, j);
        let b = gaussian(&mut rng, j, k);
        let c = gaussian(&mut rng, i, k);
        let same = same_bits(&a.matmul(&b)?, &a.matmul(&b)?)
            && same_bits(&a.t_matmul(&c)?, &a.t_matmul(&c)?)
            && same_bits(&c.matmul_t(&b)?, &c.matmul_t(&b)?);
        differ += !same as usize;
    }
    let mut r = Report::default();
    r.count("repeated products not bit-identical", differ, n);
    Ok(r)
}

fn adapter_gradient_check(ctx: &Ctx) -> Result<Report> {
    let mut err = Worst::new("max relative error of grad_a", FD_TOL);
    for t in 0..ctx.trials(100, 30) {
        let mut rng = ctx.rng(t);
        let state = random_adapter(&mut rng, 8)?;
        let (d_out, d_in) = state.w0().shape();
        let target = state
            .w0()
            .add(&delta_w(&state))?
            .add(&Matrix::gaussian(d_out, d_in, 0.3, &mut rng))?;
        err.observe(grad_a_fd_error(&state, &target)?);
    }
    let mut r = Report::default();
    r.worst(&err);
    Ok(r)
}

fn adapter_frozen_state(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(100, 20);
    let mut changed = 0;
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let initial = random_adapter(&mut rng, 12)?;
        let mut state = initial.clone();
        let (d_out, d_in) = state.w0().shape();
        for _ in 0..10 {
            let g = gaussian(&mut rng, d_out, d_in);
            let a = local_update(&state, &g, 1e-2)?;
            state = state.with_a(a)?;
        }
        let frozen = same_bits(state.w0(), initial.w0())
            && same_bits(state.l_basis(), initial.l_basis())
            && same_bits(state.r_basis(), initial.r_basis());
        changed += !frozen as usize;
    }
    let mut r = Report::default();
    r.count("frozen parts changed by local updates", changed, n);
    Ok(r)
}

fn adapter_homogeneity(ctx: &Ctx) -> Result<Report> {
    let mut err = Worst::new("max relative error of ΔW(cA) vs c²ΔW(A)", 1e-12);
    for t in 0..ctx.trials(500, 100) {
        let mut rng = ctx.rng(t);
        let state = random_adapter(&mut rng, 12)?;
        let c: f64 = rng.random_range(-3.0..3.0);
        let expected = delta_w(&state).scale(c * c);
        let scaled = state.delta_w_for(&state.a.scale(c))?;
        err.observe(relative(
            scaled.distance(&expected)?,
            expected.frobenius_norm(),
        ));
    }
    let mut r = Report::default();
    r.worst(&err);
    Ok(r)
}

fn adapter_init(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(200, 50);
    let mut ortho = Worst::new("max basis orthonormality defect", 1e-10);
    let mut differ = 0;
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let state = random_adapter(&mut rng, 16)?;
        let again = init_adapter(*state.config(), state.w0().clone())?;
        let same = same_bits(&state.a, &again.a)
            && same_bits(state.l_basis(), again.l_basis())
            && same_bits(state.r_basis(), again.r_basis());
        differ += !same as usize;
        ortho.observe(
            orthonormality_defect(state.l_basis())
                .max(orthonormality_defect(&state.r_basis().transpose())),
        );
    }
    let mut r = Report::default();
    r.count("repeated init not bit-identical", differ, n);
    r.worst(&ortho);
    Ok(r)
}

fn random_locals(
    rng: &mut SimRng,
    max_clients: usize,
    max_rank: usize,
    max_k: usize,
) -> Vec<Matrix> {
    let n = rng.random_range(1..=max_clients);
    let r = rng.random_range(1..=max_rank);
    let k = rng.random_range(1..=max_k);
    (0..n).map(|_| gaussian(rng, r, k)).collect()
}

fn server_aggregation_exactness(ctx: &Ctx) -> Result<Report> {
    let mut err = Worst::new("max ||q − Σ wₙAₙᵀAₙ|| / ||q||", 1e-12);
    for t in 0..ctx.trials(500, 100) {
        let mut rng = ctx.rng(t);
        let locals = random_locals(&mut rng, 8, 4, 12);
        let weights = if rng.random_bool(0.5) {
            uniform_weights(locals.len())
        } else {
            size_weights(
                &locals
                    .iter()
                    .map(|_| rng.random_range(1..=100))
                    .collect::<Vec<_>>(),
            )
        };
        let q = aggregate_gram(&locals, &weights)?.q;
        let k = q.rows();
        let mut reference = Matrix::zeros(k, k);
        for (a, w) in locals.iter().zip(&weights) {
            for i in 0..a.rows() {
                for p in 0..k {
                    for s in 0..k {
                        reference[(p, s)] += w * a[(i, p)] * a[(i, s)];
                    }
                }
            }
        }
        err.observe(relative(q.distance(&reference)?, q.frobenius_norm()));
    }
    let mut r = Report::default();
    r.worst(&err);
    Ok(r)
}

fn server_gram_preservation(ctx: &Ctx) -> Result<Report> {
    let mut trunc = Worst::new("max ||A_nextᵀA_next − ÃᵀÃ|| / ||q||", 1e-9);
    let mut full = Worst::new("max ||A_nextᵀA_next − q|| / ||q|| when r′ ≤ r", 1e-9);
    let mut feasible = Worst::new("max ||S*ᵀS* − I||", 1e-10);
    for t in 0..ctx.trials(500, 100) {
        let mut rng = ctx.rng(t);
        let locals = random_locals(&mut rng, 6, 4, 12);
        let (r, k) = locals[0].shape();
        let agg = aggregate_gram(&locals, &uniform_weights(locals.len()))?;
        let factor = truncate_factor(&decompose(&agg), r)?;
        let a_prev = gaussian(&mut rng, r, k);
        let res = (ctx.opts.aligner)(&a_prev, &factor)?;
        let qn = agg.q.frobenius_norm();
        let g = res.a_next.gram();
        trunc.observe(relative(g.distance(&factor.gram())?, qn));
        if agg.effective_rank <= r {
            full.observe(relative(g.distance(&agg.q)?, qn));
        }
        feasible.observe(orthonormality_defect(&res.s_star));
    }
    let mut r = Report::default();
    r.worst(&trunc);
    r.worst(&full);
    r.worst(&feasible);
    Ok(r)
}

/// Random `a_prev` and a canonical factor of rank `r′ ≤ r`.
fn procrustes_instance(rng: &mut SimRng) -> Result<(Matrix, CanonicalFactor)> {
    let r = rng.random_range(1..=6);
    let k = rng.random_range(1..=12);
    let r_prime = rng.random_range(1..=r.min(k));
    let b = gaussian(rng, r_prime, k);
    let factor = truncate_factor(&decompose(&aggregate_gram(&[b], &[1.0])?), r)?;
    Ok((gaussian(rng, r, k), factor))
}

fn server_procrustes_optimality(ctx: &Ctx) -> Result<Report> {
    let instances = ctx.trials(1000, 100);
    let samples = ctx.trials(500, 50);
    let mut gap = Worst::new("max |Tr(MᵀS*) − Σσⱼ(M)|", 1e-10);
    let mut feasible = Worst::new("max ||S*ᵀS* − I||", 1e-10);
    let mut beaten = 0;
    for t in 0..instances {
        let mut rng = ctx.rng(t);
        let (a_prev, factor) = procrustes_instance(&mut rng)?;
        let a_tilde = &factor.a_tilde;
        let res = (ctx.opts.aligner)(&a_prev, &factor)?;
        let sigma_sum: f64 = thin_svd(&a_prev.matmul_t(a_tilde)?).sigma.iter().sum();
        let objective = alignment_objective(&a_prev, a_tilde, &res.s_star)?;
        let residual = alignment_residual(&a_prev, a_tilde, &res.s_star)?;
        gap.observe((objective - sigma_sum).abs());
        feasible.observe(orthonormality_defect(&res.s_star));
        let (r, r_prime) = (a_prev.rows(), factor.rows());
        let mut lost = false;
        for _ in 0..samples {
            let s = orthonormal_columns_from(r, r_prime, &mut rng)?;
            lost |= alignment_residual(&a_prev, a_tilde, &s)? < residual
                || alignment_objective(&a_prev, a_tilde, &s)? > objective;
        }
        beaten += lost as usize;
    }
    let mut r = Report::default();
    r.worst(&gap);
    r.worst(&feasible);
    r.count(
        &format!("instances where one of {samples} random alignments did better"),
        beaten,
        instances,
    );
    Ok(r)
}

fn server_rank_bound(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(500, 100);
    let (mut exceeded, mut tight) = (0, 0);
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let mut locals = random_locals(&mut rng, 6, 4, 12);
        // some clients with rank-deficient factors
        for a in locals.iter_mut() {
            if a.rows() > 1 && rng.random_bool(0.3) {
                let inner = rng.random_range(1..a.rows());
                *a = gaussian(&mut rng, a.rows(), inner).matmul(&gaussian(
                    &mut rng,
                    inner,
                    a.cols(),
                ))?;
            }
        }
        let (r, k) = locals[0].shape();
        let bound = k.min(locals.len() * r);
        let agg = aggregate_gram(&locals, &uniform_weights(locals.len()))?;
        exceeded += (agg.effective_rank > bound) as usize;
        tight += (agg.effective_rank == bound) as usize;
    }
    let mut r = Report::default();
    r.count("effective rank above min(k, N·r)", exceeded, n);
    r.note(true, format!("bound attained in {tight}/{n}"));
    Ok(r)
}

fn server_delta_proc(ctx: &Ctx) -> Result<Report> {
    let instances = ctx.trials(500, 100);
    let samples = ctx.trials(20, 5);
    let mut optimal = Worst::new("max reported Δ_proc of S*", 1e-10);
    let mut excess = Worst::new("max residual deficit of a random S", 1e-10);
    let mut lemma = Worst::new("max ||S − S*||² − Δ_proc/σ_min", 1e-9);
    let mut checked = 0;
    for t in 0..instances {
        let mut rng = ctx.rng(t);
        let (a_prev, factor) = procrustes_instance(&mut rng)?;
        let res = (ctx.opts.aligner)(&a_prev, &factor)?;
        optimal.observe(res.delta_proc);
        let full_rank = thin_svd(&a_prev.matmul_t(&factor.a_tilde)?).rank() == factor.rows();
        for _ in 0..samples {
            let s = orthonormal_columns_from(a_prev.rows(), factor.rows(), &mut rng)?;
            let other = align_with(&a_prev, &factor, &s, &res)?;
            excess.observe(res.residual - other.residual);
            if full_rank && res.sigma_min_cross > 1e-8 {
                let bound = other.delta_proc / res.sigma_min_cross;
                lemma.observe(s.distance(&res.s_star)?.powi(2) - bound * (1.0 + 1e-9));
                checked += 1;
            }
        }
    }
    let mut r = Report::default();
    r.worst(&optimal);
    r.worst(&excess);
    r.worst(&lemma);
    r.note(checked > 0, format!("bound checked on {checked} pairs"));
    Ok(r)
}

fn baselines_gradient_check(ctx: &Ctx) -> Result<Report> {
    let mut err = Worst::new("max relative error of lora_grads", FD_TOL);
    for t in 0..ctx.trials(100, 30) {
        let mut rng = ctx.rng(t);
        let state = random_lora(&mut rng, 8)?;
        let (d_out, d_in) = (state.d_out(), state.d_in());
        let target = state
            .full_weight()
            .add(&Matrix::gaussian(d_out, d_in, 0.3, &mut rng))?;
        err.observe(lora_fd_error(&state, &target)?);
    }
    let mut r = Report::default();
    r.worst(&err);
    Ok(r)
}

fn baselines_fedex_exactness(ctx: &Ctx) -> Result<Report> {
    let mut err = Worst::new("max ||b̄ā + residual − mean(bₙaₙ)|| / ||mean||", 1e-12);
    for t in 0..ctx.trials(500, 100) {
        let mut rng = ctx.rng(t);
        let states = random_lora_clients(&mut rng, 10, 6)?;
        let (avg, residual) = fedex_aggregate(&states)?;
        let mean = mean_product(&states, &uniform_weights(states.len()))?;
        let rebuilt = avg.b.matmul(&avg.a)?.add(&residual)?;
        err.observe(relative(rebuilt.distance(&mean)?, mean.frobenius_norm()));
    }
    let mut r = Report::default();
    r.worst(&err);
    Ok(r)
}

fn baselines_federa_optimality(ctx: &Ctx) -> Result<Report> {
    let mut gap = Worst::new("max (error − best truncation error) / ||P||²", 1e-9);
    for t in 0..ctx.trials(300, 60) {
        let mut rng = ctx.rng(t);
        let states = random_lora_clients(&mut rng, 8, 5)?;
        let rank = states[0].rank();
        let p = mean_product(&states, &uniform_weights(states.len()))?;
        let out = federa_aggregate(&states, rank)?;
        let err = p.sub(&out.b.matmul(&out.a)?)?.frobenius_norm_sq();
        let svd = thin_svd(&p);
        let comps = svd.sigma.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << comps) {
            if mask.count_ones() as usize != rank.min(comps) {
                continue;
            }
            let approx = Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                (0..comps)
                    .filter(|c| mask & (1 << c) != 0)
                    .map(|c| svd.u[(i, c)] * svd.sigma[c] * svd.v[(j, c)])
                    .sum()
            });
            best = best.min(p.sub(&approx)?.frobenius_norm_sq());
        }
        gap.observe(relative((err - best).abs(), p.frobenius_norm_sq()));
    }
    let mut r = Report::default();
    r.worst(&gap);
    Ok(r)
}

fn baselines_locality(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(200, 50);
    let (mut ffa, mut fedsa) = (0, 0);
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let states = random_lora_clients(&mut rng, 10, 6)?;
        let shared_a: Vec<LoraState> = states
            .iter()
            .map(|s| s.with_factors(s.b.clone(), states[0].a.clone()))
            .collect::<Result<_>>()?;
        let out = ffa_aggregate(&shared_a)?;
        ffa += !(same_bits(&out.a, &states[0].a) && same_bits(out.w0(), states[0].w0())) as usize;
        let outs = fedsa_aggregate(&states)?;
        fedsa += !states.iter().zip(&outs).all(|(s, o)| same_bits(&s.b, &o.b)) as usize;
    }
    let mut r = Report::default();
    r.count("frozen A changed by FFA aggregation", ffa, n);
    r.count("personal B changed by FedSA aggregation", fedsa, n);
    Ok(r)
}

fn baselines_aggregation_error(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(200, 50);
    let mut consistent = Worst::new("max relative error on consistent clients", 1e-12);
    let mut not_positive = 0;
    let mut heterogeneous = 0;
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let states = random_lora_clients(&mut rng, 10, 6)?;
        let scale = mean_product(&states, &uniform_weights(states.len()))?.frobenius_norm();
        let err = aggregation_error(&states)?;
        if states.len() > 1 {
            heterogeneous += 1;
            not_positive += (err.is_nan() || err <= 0.0) as usize;
        }
        let same: Vec<LoraState> = states.iter().map(|_| states[0].clone()).collect();
        consistent.observe(relative(aggregation_error(&same)?, scale));
        let shared_a: Vec<LoraState> = states
            .iter()
            .map(|s| s.with_factors(s.b.clone(), states[0].a.clone()))
            .collect::<Result<_>>()?;
        let shared_scale =
            mean_product(&shared_a, &uniform_weights(states.len()))?.frobenius_norm();
        consistent.observe(relative(aggregation_error(&shared_a)?, shared_scale));
    }
    let w0 = Matrix::zeros(2, 2);
    let one = LoraState::from_parts(
        w0.clone(),
        Matrix::from_rows(&[[1.0], [0.0]]),
        Matrix::from_rows(&[[1.0, 0.0]]),
        1.0,
    )?;
    let two = LoraState::from_parts(
        w0,
        Matrix::from_rows(&[[0.0], [1.0]]),
        Matrix::from_rows(&[[0.0, 1.0]]),
        1.0,
    )?;
    let pair = aggregation_error(&[one, two])?;
    let mut r = Report::default();
    r.count(
        "heterogeneous clients with zero error",
        not_positive,
        heterogeneous,
    );
    r.worst(&consistent);
    r.note(
        (pair - 0.5).abs() <= 1e-15,
        format!("constructed pair error {pair} (expected 0.5)"),
    );
    Ok(r)
}

fn small_config(scheme: SchemeId, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskSpec {
            d_out: 8,
            d_in: 8,
            num_samples: 64,
            eval_samples: 32,
            true_rank: 1,
            seed,
            ..TaskSpec::default()
        },
        scheme,
        num_clients: 4,
        rounds: 4,
        eta: 1e-4,
        rank: 2,
        dirichlet_rho: 0.3,
        seed,
        ..ExperimentConfig::default()
    }
}

fn rows(metrics: &[RoundMetrics]) -> Vec<[String; 13]> {
    metrics.iter().map(RoundMetrics::csv_record).collect()
}

fn run_rows(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<[String; 13]>> {
    Ok(rows(
        &run_experiment_with(cfg, exec, &mut |_| Ok(()))?.metrics,
    ))
}

fn federation_reproducibility(ctx: &Ctx) -> Result<Report> {
    let schemes: &[SchemeId] = if ctx.opts.quick {
        &[SchemeId::Florg, SchemeId::FedIt, SchemeId::FedSaLora]
    } else {
        &SchemeId::ALL
    };
    let mut differ = 0;
    let mut rng = ctx.rng(0);
    for &scheme in schemes {
        let mut cfg = small_config(scheme, rng.random());
        cfg.participation_ratio = 0.75;
        let first = run_rows(&cfg, Execution::default())?;
        let again = run_rows(&cfg, Execution::default())?;
        let sequential = run_rows(&cfg, Execution::Sequential)?;
        differ += !(first == again && first == sequential) as usize;
    }
    let mut r = Report::default();
    r.count("schemes whose repeated runs differ", differ, schemes.len());
    Ok(r)
}

fn federation_data_conservation(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(200, 50);
    let mut broken = 0;
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let m = rng.random_range(1..=300);
        let classes = rng.random_range(1..=6).min(m);
        let labels: Vec<usize> = (0..m)
            .map(|i| {
                if i < classes {
                    i
                } else {
                    rng.random_range(0..classes)
                }
            })
            .collect();
        let clients = rng.random_range(1..=m.min(20));
        let rho = 10f64.powf(rng.random_range(-1.3..1.0));
        let shards = dirichlet_partition(&labels, clients, rho, rng.random())?;
        let mut all: Vec<usize> = shards
            .iter()
            .flat_map(|s| s.indices.iter().copied())
            .collect();
        all.sort_unstable();
        let ok = shards.len() == clients
            && shards.iter().all(|s| s.sample_count() > 0)
            && all.len() == m
            && all.iter().enumerate().all(|(i, &x)| i == x);
        broken += !ok as usize;
    }
    let mut r = Report::default();
    r.count(
        "partitions that lose, duplicate or starve samples",
        broken,
        n,
    );
    Ok(r)
}

fn federation_scheme_independence(ctx: &Ctx) -> Result<Report> {
    let n = ctx.trials(6, 2);
    let mut differ = 0;
    for t in 0..n {
        let mut rng = ctx.rng(t);
        let mut base = small_config(SchemeId::Florg, rng.random());
        if t % 2 == 1 {
            base.task.kind = TaskKind::SoftmaxClassify;
            base.task.num_classes = base.task.d_out;
        }
        let w = gaussian(&mut rng, base.task.d_out, base.task.d_in);
        let losses = SchemeId::ALL
            .iter()
            .map(|&scheme| {
                let sim = Simulation::new(
                    ExperimentConfig {
                        scheme,
                        ..base.clone()
                    },
                    Execution::Sequential,
                )?;
                let task = &sim.tasks()[0];
                task.loss(&w, &task.eval).map(f64::to_bits)
            })
            .collect::<Result<Vec<_>>>()?;
        differ += losses.iter().any(|&l| l != losses[0]) as usize;
    }
    let mut r = Report::default();
    r.count("tasks whose loss depends on the scheme", differ, n);
    Ok(r)
}

fn federation_bias_freedom(ctx: &Ctx) -> Result<Report> {
    let mut rng = ctx.rng(0);
    let seed = rng.random();
    let mut cfg = small_config(SchemeId::Florg, seed);
    cfg.num_clients = 2;
    cfg.dirichlet_rho = 0.1;
    cfg.rounds = ctx.trials(20, 5);
    let florg = run_experiment_with(&cfg, Execution::default(), &mut |_| Ok(()))?.metrics;
    let mut err = Worst::new("max FLoRG agg_error", 1e-12);
    for m in &florg {
        err.observe(m.agg_error);
    }
    cfg.scheme = SchemeId::FedIt;
    let fedit = run_experiment_with(&cfg, Execution::default(), &mut |_| Ok(()))?.metrics;
    let zero = fedit
        .iter()
        .filter(|m| m.agg_error.is_nan() || m.agg_error <= 0.0)
        .count();
    let mut r = Report::default();
    r.worst(&err);
    r.count("FedIT rounds without aggregation error", zero, fedit.len());
    Ok(r)
}

fn per_client_total(scheme: SchemeId, dims: LayerDims) -> usize {
    uplink_params(scheme, dims) + downlink_params(scheme, dims)
}

fn federation_communication_ordering(ctx: &Ctx) -> Result<Report> {
    use SchemeId::*;
    let mut cases = 0;
    let mut unordered = 0;
    for d in [2usize, 4, 8, 16, 64, 512] {
        for rank in [1usize, 2, 4].into_iter().filter(|&r| r <= d) {
            let dims = LayerDims {
                d_out: d,
                d_in: d,
                rank,
            };
            let c = |s| per_client_total(s, dims);
            let ordered = c(FfaLora) <= c(FedSaLora)
                && c(FedSaLora) <= c(Florg)
                && c(Florg) < c(FedIt)
                && c(FedIt) == c(FeDeRa)
                && c(FeDeRa) < c(FedExLora)
                && uplink_params(Florg, dims) == rank * d
                && 2 * uplink_params(Florg, dims) == uplink_params(FedIt, dims);
            cases += 1;
            unordered += !ordered as usize;
        }
    }
    // the run loop's counters must agree with the formulas
    let mut mismatched = 0;
    let mut rng = ctx.rng(0);
    for scheme in SchemeId::ALL {
        let mut cfg = small_config(scheme, rng.random());
        cfg.rounds = 2;
        cfg.participation_ratio = 0.5;
        let dims = LayerDims {
            d_out: cfg.task.d_out,
            d_in: cfg.task.d_in,
            rank: cfg.rank,
        };
        let p = cfg.participants_per_round() as u64;
        let metrics = run_experiment_with(&cfg, Execution::default(), &mut |_| Ok(()))?.metrics;
        mismatched += metrics
            .iter()
            .filter(|m| {
                m.uplink_params != p * uplink_params(scheme, dims) as u64
                    || m.downlink_params != p * downlink_params(scheme, dims) as u64
            })
            .count();
    }
    let mut r = Report::default();
    r.count(
        "layer shapes violating FFA ≤ FedSA ≤ FLoRG < FedIT = FeDeRA < FedEx",
        unordered,
        cases,
    );
    r.count(
        "run rounds whose counters differ from the formulas",
        mismatched,
        2 * SchemeId::ALL.len(),
    );
    Ok(r)
}
