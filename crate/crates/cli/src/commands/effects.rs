use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use gkrls_core::data::{load_csv, ColumnRoles};
use gkrls_core::effects::{
    ame, derivative_grid, endpoint_contrast, first_difference, parse_grid, predicted_grid, second_derivative_avg,
    EffectEstimate, EffectOptions, CSV_HEADER,
};
use gkrls_core::persistence::load_model;
use gkrls_core::GkrlsError;
use serde::Serialize;

use crate::{write_bytes, write_json_file, CliError, CliResult, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectChoice {
    /// Average marginal effect at the observed values.
    Ame,
    /// Average prediction with the variable set to each grid value.
    Grid,
    /// Average derivative at each grid value.
    Derivative,
    /// Average second derivative (observed values, or each grid value).
    Second,
    /// Average change when moving the variable from --from to --to.
    Difference,
    /// Derivative and curvature contrasts between --from, --mid and --to.
    Contrast,
}

#[derive(Debug, Args, Serialize)]
pub struct EffectsArgs {
    /// Model artifact (.gkm).
    #[arg(long)]
    pub model: PathBuf,
    /// Data the effects are averaged over (usually the training data).
    #[arg(long)]
    pub data: PathBuf,
    /// Columns to treat as categorical (as at fit time).
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Covariate to perturb.
    #[arg(long = "var")]
    pub variable: String,
    #[arg(long, value_enum, default_value = "ame")]
    pub kind: EffectChoice,
    /// Grid as lo:hi:n.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub from: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub to: Option<f64>,
    /// Middle point for the curvature contrast.
    #[arg(long, allow_hyphen_values = true)]
    pub mid: Option<f64>,
    /// Finite-difference step; chosen from the variable's scale when absent.
    #[arg(long)]
    pub step: Option<f64>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the full estimate (with covariance) as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn need(v: Option<f64>, flag: &str, kind: EffectChoice) -> CliResult<f64> {
    v.ok_or_else(|| CliError::Usage(format!("--kind {kind:?} needs --{flag}").to_lowercase()))
}

pub fn compute(a: &EffectsArgs) -> CliResult<EffectEstimate> {
    let model = load_model(&a.model)?;
    let roles = ColumnRoles {
        categorical: a.categorical.clone(),
        scoring: true,
        ..ColumnRoles::outcome(model.outcome_name())
    };
    let data = load_csv(&a.data, &roles)?;
    if data.column(&a.variable).is_none() {
        return Err(GkrlsError::Data(format!("unknown variable '{}': not a numeric column of the data", a.variable)).into());
    }
    let opts = EffectOptions {
        step: a.step,
        individual: false,
    };
    let grid = a.grid.as_deref().map(parse_grid).transpose()?;
    let need_grid = || {
        grid.clone()
            .ok_or_else(|| CliError::Usage(format!("--kind {:?} needs --grid lo:hi:n", a.kind).to_lowercase()))
    };
    let var = a.variable.as_str();
    let est = match a.kind {
        EffectChoice::Ame => ame(&model, &data, var, &opts)?,
        EffectChoice::Grid => predicted_grid(&model, &data, var, &need_grid()?, &opts)?,
        EffectChoice::Derivative => derivative_grid(&model, &data, var, &need_grid()?, &opts)?,
        EffectChoice::Second => second_derivative_avg(&model, &data, var, grid.as_deref(), &opts)?,
        EffectChoice::Difference => first_difference(
            &model,
            &data,
            var,
            need(a.from, "from", a.kind)?,
            need(a.to, "to", a.kind)?,
            &opts,
        )?,
        EffectChoice::Contrast => endpoint_contrast(
            &model,
            &data,
            var,
            need(a.from, "from", a.kind)?,
            need(a.to, "to", a.kind)?,
            need(a.mid, "mid", a.kind)?,
            &opts,
        )?,
    };
    Ok(est)
}

pub fn run(a: &EffectsArgs) -> CliResult<i32> {
    let t = Instant::now();
    let est = compute(a)?;
    let secs = t.elapsed().as_secs_f64();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(GkrlsError::from)?;
    est.write_csv(&mut w)?;
    let bytes = w.into_inner().map_err(|e| GkrlsError::Data(e.to_string()))?;
    match &a.out {
        Some(p) => write_bytes(p, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    if let Some(p) = &a.json {
        write_json_file(p, &est)?;
    }
    log::info!("effects for '{}' in {secs:.3}s", a.variable);
    Ok(EXIT_OK)
}
