use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use gkrls_core::data::{load_csv, ColumnRoles};
use gkrls_core::effects::normal_quantile;
use gkrls_core::persistence::load_model;
use gkrls_core::solver::Scale;
use serde::Serialize;

use crate::{emit_csv, CliResult, EXIT_OK};

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictScale {
    Link,
    Response,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Model artifact (.gkm).
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with the model's covariates; the outcome column may be absent.
    #[arg(long)]
    pub data: PathBuf,
    /// Columns to treat as categorical (as at fit time).
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    #[arg(long, value_enum, default_value = "response")]
    pub scale: PredictScale,
    /// Add standard errors and 95% intervals from the stored variance.
    #[arg(long)]
    pub se: bool,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PredictionRow {
    row: usize,
    prediction: f64,
    se: Option<f64>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

pub fn run(a: &PredictArgs) -> CliResult<i32> {
    let t = Instant::now();
    let model = load_model(&a.model)?;
    let roles = ColumnRoles {
        categorical: a.categorical.clone(),
        scoring: true,
        ..ColumnRoles::outcome(model.outcome_name())
    };
    let data = load_csv(&a.data, &roles)?;
    let load = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let rows = model.design_rows(&data)?;
    let eta = model.linear_predictor(rows.as_ref());
    let pred = model.predict_rows(
        rows.as_ref(),
        match a.scale {
            PredictScale::Link => Scale::Link,
            PredictScale::Response => Scale::Response,
        },
    )?;
    let z = normal_quantile(0.975);
    let family = model.family;
    let out: Vec<PredictionRow> = eta
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let on_scale = |v: f64| match a.scale {
                PredictScale::Link => v,
                PredictScale::Response => family.linkinv(v),
            };
            let (se, lo, hi) = if a.se {
                let r: Vec<f64> = (0..rows.ncols()).map(|j| rows[(i, j)]).collect();
                let se_link = model.variance.quad_form(&r).max(0.0).sqrt();
                let se = match a.scale {
                    PredictScale::Link => se_link,
                    PredictScale::Response => se_link * family.mu_eta(e).abs(),
                };
                (Some(se), Some(on_scale(e - z * se_link)), Some(on_scale(e + z * se_link)))
            } else {
                (None, None, None)
            };
            PredictionRow {
                row: i + 1,
                prediction: pred[i],
                se,
                ci_lo: lo,
                ci_hi: hi,
            }
        })
        .collect();
    let prediction = t.elapsed().as_secs_f64();
    emit_csv(a.out.as_deref(), &out)?;
    log::info!("predicted {} rows (load {load:.3}s, prediction {prediction:.3}s)", out.len());
    Ok(EXIT_OK)
}
