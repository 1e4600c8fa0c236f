//! Design assembly: fixed-effect matrix, penalized blocks and their
//! reduction to an identity-penalized basis.
//!
//! Every penalized block `(Z_j, S_j)` is rewritten as `Z̃_j = Z_j·U_j·D_j^{-1/2}`
//! where `S_j = U_j D_j U_jᵀ` keeps eigenvalues above `1e-10` of the largest.
//! The penalty on the new coefficients `γ_j` is `λ_j‖γ_j‖²` and the original
//! coefficients are `α_j = U_j D_j^{-1/2} γ_j`. For kernel penalties the
//! discarded directions carry (numerically) no signal: the design vanishes
//! on the null space of a PSD kernel. Random-intercept blocks already have
//! `S_j = I` and are passed through unchanged.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_standardizer, fit_standardizer, Dataset, StandardizationTransform, StandardizeKind,
};
use crate::error::{GkrlsError, Result};
use crate::kernel::{
    build_kernel_block, default_bandwidth, kernel_predict_design, make_sketch_plan, KernelOptions,
    KernelPredictor, SketchMethod, SketchPlanSummary, DEFAULT_DELTA,
};
use crate::linalg::{independent_columns, positive_rank, sym_eigen, EIGEN_REL_TOL};
use crate::rng::derive_seed;
use crate::spec::{ModelSpec, TermSpec};

/// Where a design column comes from in a data set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnSource {
    Numeric { name: String },
    Indicator { factor: String, level: String },
}

impl ColumnSource {
    pub fn label(&self) -> String {
        match self {
            ColumnSource::Numeric { name } => name.clone(),
            ColumnSource::Indicator { factor, level } => crate::data::indicator_name(factor, level),
        }
    }

    pub fn values(&self, data: &Dataset) -> Result<Vec<f64>> {
        match self {
            ColumnSource::Numeric { name } => data
                .column(name)
                .map(|c| c.to_vec())
                .ok_or_else(|| GkrlsError::Data(format!("column '{name}' missing from data"))),
            ColumnSource::Indicator { factor, level } => {
                if let Some(f) = data.factor(factor) {
                    return Ok(f.codes.iter().map(|&c| (f.levels[c] == *level) as u8 as f64).collect());
                }
                // fall back to a numeric indicator column of the same name
                let name = crate::data::indicator_name(factor, level);
                data.column(&name).map(|c| c.to_vec()).ok_or_else(|| {
                    GkrlsError::Data(format!("categorical column '{factor}' missing from data"))
                })
            }
        }
    }
}

fn resolve_vars(data: &Dataset, vars: &[String]) -> Result<Vec<ColumnSource>> {
    let mut out = Vec::new();
    for v in vars {
        if let Some(e) = data.expansion(v) {
            for level in e.levels.iter().skip(1) {
                out.push(ColumnSource::Indicator {
                    factor: e.source.clone(),
                    level: level.clone(),
                });
            }
        } else if data.column_index(v).is_some() {
            let from_factor = data.expansions().iter().find_map(|e| {
                e.columns
                    .iter()
                    .position(|c| c == v)
                    .map(|k| (e.source.clone(), e.levels[k + 1].clone()))
            });
            out.push(match from_factor {
                Some((factor, level)) => ColumnSource::Indicator { factor, level },
                None => ColumnSource::Numeric { name: v.clone() },
            });
        } else {
            return Err(GkrlsError::Spec(format!("unknown column '{v}'")));
        }
    }
    Ok(out)
}

fn columns_matrix(data: &Dataset, sources: &[ColumnSource]) -> Result<Mat<f64>> {
    let cols = sources.iter().map(|s| s.values(data)).collect::<Result<Vec<_>>>()?;
    Ok(Mat::from_fn(data.n(), cols.len(), |i, j| cols[j][i]))
}

/// Defaults for kernel terms that do not set their own options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelDefaults {
    pub method: SketchMethod,
    pub delta: f64,
    pub size: Option<usize>,
    pub standardize: StandardizeKind,
    pub options: KernelOptions,
}

impl Default for KernelDefaults {
    fn default() -> Self {
        Self {
            method: SketchMethod::Subsample,
            delta: DEFAULT_DELTA,
            size: None,
            standardize: StandardizeKind::Mahalanobis,
            options: KernelOptions::default(),
        }
    }
}

/// How to rebuild a penalized block on new data.
#[derive(Debug, Clone)]
pub enum TermRecipe {
    RandomIntercept {
        label: String,
        group: String,
        levels: Vec<String>,
    },
    Kernel {
        label: String,
        inputs: Vec<ColumnSource>,
        standardizer: StandardizationTransform,
        predictor: KernelPredictor,
        plan: SketchPlanSummary,
    },
}

impl TermRecipe {
    pub fn label(&self) -> &str {
        match self {
            TermRecipe::RandomIntercept { label, .. } | TermRecipe::Kernel { label, .. } => label,
        }
    }

    /// Unreduced block design `Z_j` for a data set.
    pub fn block_design(&self, data: &Dataset) -> Result<Mat<f64>> {
        match self {
            TermRecipe::RandomIntercept { group, levels, .. } => {
                let f = data
                    .factor(group)
                    .ok_or_else(|| GkrlsError::Data(format!("group column '{group}' missing from data")))?;
                // rows in unseen groups get a zero row (population-level prediction)
                let map: Vec<Option<usize>> = f
                    .levels
                    .iter()
                    .map(|l| levels.iter().position(|t| t == l))
                    .collect();
                let mut z = Mat::zeros(data.n(), levels.len());
                for (i, &c) in f.codes.iter().enumerate() {
                    if let Some(k) = map[c] {
                        z[(i, k)] = 1.0;
                    }
                }
                Ok(z)
            }
            TermRecipe::Kernel {
                inputs,
                standardizer,
                predictor,
                ..
            } => {
                let raw = columns_matrix(data, inputs)?;
                let w = apply_standardizer(standardizer, raw.as_ref())?;
                kernel_predict_design(w.as_ref(), predictor)
            }
        }
    }
}

/// One penalized block before reduction.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub label: String,
    pub z: Mat<f64>,
    pub penalty: Mat<f64>,
}

/// Fixed design, penalized blocks and bookkeeping.
#[derive(Debug, Clone)]
pub struct AssembledDesign {
    pub x: Mat<f64>,
    pub fixed_names: Vec<String>,
    pub dropped_fixed: Vec<String>,
    pub blocks: Vec<PenaltyBlock>,
    /// Null-space dimension of the block-diagonal penalty: `p + Σ dim null(S_j)`.
    pub null_space_dim: usize,
    pub warnings: Vec<String>,
}

impl AssembledDesign {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.blocks.iter().map(|b| b.z.ncols()).sum()
    }
}

/// Fixed-effect part of the layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedLayout {
    pub intercept: bool,
    pub columns: Vec<ColumnSource>,
    pub dropped: Vec<String>,
}

impl FixedLayout {
    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = Vec::new();
        if self.intercept {
            n.push("(Intercept)".into());
        }
        n.extend(self.columns.iter().map(|c| c.label()));
        n
    }

    pub fn p(&self) -> usize {
        self.columns.len() + self.intercept as usize
    }

    pub fn design(&self, data: &Dataset) -> Result<Mat<f64>> {
        let cols = self.columns.iter().map(|s| s.values(data)).collect::<Result<Vec<_>>>()?;
        let off = self.intercept as usize;
        Ok(Mat::from_fn(data.n(), self.p(), |i, j| {
            if j < off {
                1.0
            } else {
                cols[j - off][i]
            }
        }))
    }
}

/// Build the design for `spec` on training data.
///
/// Kernel term `j` (0-based among all terms) uses its own seed if given,
/// otherwise one derived from `seed` and `j`.
pub fn assemble(
    data: &Dataset,
    spec: &ModelSpec,
    defaults: &KernelDefaults,
    seed: u64,
) -> Result<(AssembledDesign, FixedLayout, Vec<TermRecipe>)> {
    spec.validate(data)?;
    let n = data.n();
    let mut warnings = Vec::new();

    let mut fixed_sources: Vec<ColumnSource> = Vec::new();
    for t in &spec.terms {
        if let TermSpec::Fixed { vars } = t {
            for s in resolve_vars(data, vars)? {
                if !fixed_sources.contains(&s) {
                    fixed_sources.push(s);
                }
            }
        }
    }
    let candidate = FixedLayout {
        intercept: spec.intercept,
        columns: fixed_sources.clone(),
        dropped: vec![],
    };
    let x_all = candidate.design(data)?;
    let keep = independent_columns(x_all.as_ref(), 1e-9);
    let off = spec.intercept as usize;
    if spec.intercept && keep.first() != Some(&0) {
        return Err(GkrlsError::Data("intercept column is degenerate".into()));
    }
    let mut kept_sources = Vec::new();
    let mut dropped = Vec::new();
    for (j, s) in fixed_sources.iter().enumerate() {
        if keep.contains(&(j + off)) {
            kept_sources.push(s.clone());
        } else {
            warnings.push(format!("fixed column '{}' is collinear and was dropped", s.label()));
            dropped.push(s.label());
        }
    }
    let fixed = FixedLayout {
        intercept: spec.intercept,
        columns: kept_sources,
        dropped: dropped.clone(),
    };
    let x = Mat::from_fn(n, keep.len(), |i, j| x_all[(i, keep[j])]);

    let mut blocks = Vec::new();
    let mut recipes = Vec::new();
    let mut null_dim = fixed.p();
    for (tj, t) in spec.terms.iter().enumerate() {
        match t {
            TermSpec::Fixed { .. } => {}
            TermSpec::RandomIntercept { group } => {
                let f = data.factor(group).expect("validated");
                let recipe = TermRecipe::RandomIntercept {
                    label: t.label(),
                    group: group.clone(),
                    levels: f.levels.clone(),
                };
                let z = recipe.block_design(data)?;
                let q = z.ncols();
                blocks.push(PenaltyBlock {
                    label: t.label(),
                    z,
                    penalty: Mat::identity(q, q),
                });
                recipes.push(recipe);
            }
            TermSpec::Kernel(k) => {
                let inputs = resolve_vars(data, &k.vars)?;
                let raw = columns_matrix(data, &inputs)?;
                let kind = k.standardize.unwrap_or(defaults.standardize);
                let standardizer = fit_standardizer(raw.as_ref(), kind)?;
                warnings.extend(standardizer.warnings.iter().map(|w| format!("{}: {w}", t.label())));
                let w = apply_standardizer(&standardizer, raw.as_ref())?;
                let bandwidth = k.bandwidth.unwrap_or_else(|| default_bandwidth(&standardizer));
                let method = k.sketch.method.unwrap_or(defaults.method);
                let delta = k.sketch.delta.unwrap_or(defaults.delta);
                let size = k.sketch.size.or(if k.sketch.delta.is_some() { None } else { defaults.size });
                let term_seed = k.sketch.seed.unwrap_or_else(|| derive_seed(seed, tj as u64));
                let plan = make_sketch_plan(n, method, delta, term_seed, size)?;
                let block = build_kernel_block(w.as_ref(), &plan, bandwidth, &defaults.options)?;
                blocks.push(PenaltyBlock {
                    label: t.label(),
                    z: block.design,
                    penalty: block.penalty,
                });
                recipes.push(TermRecipe::Kernel {
                    label: t.label(),
                    inputs,
                    standardizer,
                    predictor: block.predictor,
                    plan: plan.summary(),
                });
            }
        }
    }
    // null-space dimension of each kernel penalty
    for b in &blocks {
        if b.penalty.nrows() > 0 && !is_identity(b.penalty.as_ref()) {
            let e = sym_eigen(b.penalty.as_ref())?;
            null_dim += b.penalty.nrows() - positive_rank(&e.values, EIGEN_REL_TOL);
        }
    }
    Ok((
        AssembledDesign {
            x,
            fixed_names: fixed.names(),
            dropped_fixed: dropped,
            blocks,
            null_space_dim: null_dim,
            warnings,
        },
        fixed,
        recipes,
    ))
}

fn is_identity(m: MatRef<'_, f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)] == if i == j { 1.0 } else { 0.0 }))
}

/// A reduced penalized block: `Z̃_j = Z_j·basis` with penalty `λ_j·I`.
#[derive(Debug, Clone)]
pub struct ReducedBlock {
    pub label: String,
    /// Column offset of the block inside the full reduced design.
    pub offset: usize,
    pub rank: usize,
    /// `q_j × r_j` map from reduced to original coefficients; `None` is identity.
    pub basis: Option<Mat<f64>>,
    /// Sum of log eigenvalues of `S_j` over the retained directions.
    pub log_pdet: f64,
    /// Smallest eigenvalue of `S_j` relative to the largest (PSD diagnostic).
    pub min_rel_eigen: f64,
}

/// Reduced design `[X | Z̃_1 | … | Z̃_J]` with unit penalties on the `Z̃` columns.
#[derive(Debug, Clone)]
pub struct PenalizedDesign {
    pub matrix: Mat<f64>,
    pub p: usize,
    pub blocks: Vec<ReducedBlock>,
}

impl PenalizedDesign {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncoef(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Diagonal of `S_λ` in the reduced basis.
    pub fn penalty_diag(&self, lambda: &[f64]) -> Vec<f64> {
        assert_eq!(lambda.len(), self.blocks.len());
        let mut d = vec![0.0; self.ncoef()];
        for (b, &l) in self.blocks.iter().zip(lambda) {
            for v in &mut d[b.offset..b.offset + b.rank] {
                *v = l;
            }
        }
        d
    }

    /// Map reduced coefficients to `(β, [α_j])` on the original blocks.
    pub fn original_coefficients(&self, coef: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let beta = coef[..self.p].to_vec();
        let alphas = self
            .blocks
            .iter()
            .map(|b| {
                let g = &coef[b.offset..b.offset + b.rank];
                match &b.basis {
                    Some(u) => crate::linalg::mat_vec(u.as_ref(), g),
                    None => g.to_vec(),
                }
            })
            .collect();
        (beta, alphas)
    }

    /// Linear map `T` with `(β, α) = T·coef`.
    pub fn expansion_matrix(&self) -> Mat<f64> {
        let q: usize = self
            .blocks
            .iter()
            .map(|b| b.basis.as_ref().map_or(b.rank, |u| u.nrows()))
            .sum();
        let mut t = Mat::zeros(self.p + q, self.ncoef());
        for i in 0..self.p {
            t[(i, i)] = 1.0;
        }
        let mut row = self.p;
        for b in &self.blocks {
            match &b.basis {
                Some(u) => {
                    for j in 0..b.rank {
                        for i in 0..u.nrows() {
                            t[(row + i, b.offset + j)] = u[(i, j)];
                        }
                    }
                    row += u.nrows();
                }
                None => {
                    for j in 0..b.rank {
                        t[(row + j, b.offset + j)] = 1.0;
                    }
                    row += b.rank;
                }
            }
        }
        t
    }
}

/// Reduce an assembled design to the identity-penalized basis.
pub fn reduce(design: &AssembledDesign) -> Result<PenalizedDesign> {
    let n = design.n();
    let p = design.x.ncols();
    let mut parts: Vec<Mat<f64>> = Vec::new();
    let mut blocks = Vec::new();
    let mut offset = p;
    for b in &design.blocks {
        if b.z.nrows() != n {
            return Err(GkrlsError::Dimension(format!("block '{}' has {} rows", b.label, b.z.nrows())));
        }
        let (zr, basis, rank, log_pdet, min_rel) = if is_identity(b.penalty.as_ref()) {
            (b.z.clone(), None, b.z.ncols(), 0.0, 1.0)
        } else {
            let e = sym_eigen(b.penalty.as_ref())?;
            let top = e.values.first().copied().unwrap_or(0.0);
            let min_rel = e.values.last().copied().unwrap_or(0.0) / top;
            if min_rel < -1e-8 {
                log::warn!("penalty of '{}' has relative eigenvalue {min_rel:.3e}; clamping to PSD", b.label);
            }
            let r = positive_rank(&e.values, EIGEN_REL_TOL);
            if r == 0 {
                return Err(GkrlsError::Singular { block: b.label.clone() });
            }
            let u = Mat::from_fn(b.penalty.nrows(), r, |i, k| e.vectors[(i, k)] / e.values[k].sqrt());
            let zr = &b.z * &u;
            let lp: f64 = e.values[..r].iter().map(|v| v.ln()).sum();
            (zr, Some(u), r, lp, min_rel)
        };
        blocks.push(ReducedBlock {
            label: b.label.clone(),
            offset,
            rank,
            basis,
            log_pdet,
            min_rel_eigen: min_rel,
        });
        offset += rank;
        parts.push(zr);
    }
    let mut matrix = Mat::zeros(n, offset);
    for j in 0..p {
        for i in 0..n {
            matrix[(i, j)] = design.x[(i, j)];
        }
    }
    for (b, z) in blocks.iter().zip(&parts) {
        for j in 0..b.rank {
            for i in 0..n {
                matrix[(i, b.offset + j)] = z[(i, j)];
            }
        }
    }
    Ok(PenalizedDesign { matrix, p, blocks })
}

/// Everything needed to rebuild the reduced design on new data.
#[derive(Debug, Clone)]
pub struct DesignRecipe {
    pub fixed: FixedLayout,
    pub terms: Vec<TermRecipe>,
    /// Per-term reduction metadata (same order as `terms`).
    pub blocks: Vec<ReducedBlock>,
}

impl DesignRecipe {
    pub fn ncoef(&self) -> usize {
        self.fixed.p() + self.blocks.iter().map(|b| b.rank).sum::<usize>()
    }

    /// Reduced design rows `[X | Z_1·B_1 | …]` for a data set.
    pub fn design_for(&self, data: &Dataset) -> Result<Mat<f64>> {
        let n = data.n();
        let x = self.fixed.design(data)?;
        let mut out = Mat::zeros(n, self.ncoef());
        for j in 0..x.ncols() {
            for i in 0..n {
                out[(i, j)] = x[(i, j)];
            }
        }
        for (t, b) in self.terms.iter().zip(&self.blocks) {
            let z = t.block_design(data)?;
            let zr = match &b.basis {
                Some(u) => &z * u,
                None => z,
            };
            for j in 0..b.rank {
                for i in 0..n {
                    out[(i, b.offset + j)] = zr[(i, j)];
                }
            }
        }
        Ok(out)
    }
}

/// Assemble and reduce in one step.
pub fn build_design(
    data: &Dataset,
    spec: &ModelSpec,
    defaults: &KernelDefaults,
    seed: u64,
) -> Result<(PenalizedDesign, DesignRecipe, Vec<String>)> {
    let (assembled, fixed, terms) = assemble(data, spec, defaults, seed)?;
    let reduced = reduce(&assembled)?;
    let recipe = DesignRecipe {
        fixed,
        terms,
        blocks: reduced.blocks.clone(),
    };
    Ok((reduced, recipe, assembled.warnings))
}
