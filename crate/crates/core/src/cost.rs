//! Energy, emissions and price estimates for training runs.
//!
//! Energy is `E_gpu * N * T * PUE` at the GPU's rated power. Emissions are
//! computed from the energy figure after rounding to two decimals in MWh,
//! which is the convention the published resource table follows (its CO2
//! column is exactly four times its MWh column).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostInputs {
    /// Rated power per GPU module in watts.
    pub e_gpu: f64,
    pub n_gpus: u32,
    /// Wall time in hours; `batch_report` overrides this per run.
    pub wall_hours: f64,
    pub pue: f64,
    /// kg CO2 per kWh.
    pub carbon_intensity: f64,
    pub price_per_gpu_hour: f64,
    /// Target peak FLOPs divided by reference peak FLOPs.
    pub perf_ratio: f64,
    /// Label only; no conversion is applied.
    pub currency: String,
}

impl Default for CostInputs {
    fn default() -> Self {
        CostInputs {
            e_gpu: 560.0,
            n_gpus: 32,
            wall_hours: 0.0,
            pue: 1.04,
            carbon_intensity: 0.004,
            price_per_gpu_hour: 1.67,
            perf_ratio: 163.4 / 95.7,
            currency: "EUR".to_string(),
        }
    }
}

impl CostInputs {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.e_gpu) {
            errs.push("e_gpu: must be > 0");
        }
        if self.n_gpus == 0 {
            errs.push("n_gpus: must be > 0");
        }
        if !(self.wall_hours.is_finite() && self.wall_hours >= 0.0) {
            errs.push("wall_hours: must be >= 0");
        }
        if !(self.pue.is_finite() && self.pue >= 1.0) {
            errs.push("pue: must be >= 1");
        }
        if !positive(self.carbon_intensity) {
            errs.push("carbon_intensity: must be > 0");
        }
        if !positive(self.price_per_gpu_hour) {
            errs.push("price_per_gpu_hour: must be > 0");
        }
        if !positive(self.perf_ratio) {
            errs.push("perf_ratio: must be > 0");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub energy_mwh: f64,
    pub co2_kg: f64,
    pub gpu_hours: f64,
    pub price: f64,
}

/// Round to two decimals, the reporting precision of the resource table.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn estimate_energy(inputs: &CostInputs) -> Result<f64> {
    inputs.validate()?;
    let watt_hours = inputs.e_gpu * inputs.n_gpus as f64 * inputs.wall_hours * inputs.pue;
    Ok(watt_hours / 1e6)
}

/// kg CO2 for an energy figure, after rounding the MWh value to two decimals.
pub fn estimate_co2(energy_mwh: f64, intensity: f64) -> f64 {
    round2(energy_mwh) * 1000.0 * intensity
}

/// kg CO2 without the reporting round.
pub fn estimate_co2_exact(energy_mwh: f64, intensity: f64) -> f64 {
    energy_mwh * 1000.0 * intensity
}

pub fn gpu_hours(wall_hours: f64, n_gpus: u32) -> f64 {
    wall_hours * n_gpus as f64
}

/// Price after normalising GPU hours to the reference hardware's throughput.
pub fn estimate_price(
    wall_hours: f64,
    n_gpus: u32,
    perf_ratio: f64,
    price_per_gpu_hour: f64,
) -> Result<f64> {
    if !(perf_ratio.is_finite() && perf_ratio > 0.0) {
        return Err(Error::config("perf_ratio: must be > 0"));
    }
    if !(price_per_gpu_hour.is_finite() && price_per_gpu_hour > 0.0) {
        return Err(Error::config("price_per_gpu_hour: must be > 0"));
    }
    Ok(gpu_hours(wall_hours, n_gpus) / perf_ratio * price_per_gpu_hour)
}

pub fn report(inputs: &CostInputs) -> Result<CostReport> {
    let energy = estimate_energy(inputs)?;
    Ok(CostReport {
        energy_mwh: energy,
        co2_kg: estimate_co2(energy, inputs.carbon_intensity),
        gpu_hours: gpu_hours(inputs.wall_hours, inputs.n_gpus),
        price: estimate_price(
            inputs.wall_hours,
            inputs.n_gpus,
            inputs.perf_ratio,
            inputs.price_per_gpu_hour,
        )?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCost {
    pub name: String,
    pub wall_hours: f64,
    pub report: CostReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub rows: Vec<RunCost>,
    pub total_wall_hours: f64,
    /// Sum of the per-row MWh figures rounded to two decimals.
    pub total_mwh: f64,
    pub total_co2_kg: f64,
    pub total_gpu_hours: f64,
    pub total_price: f64,
    pub currency: String,
}

pub fn batch_report(runs: &[(String, f64)], inputs: &CostInputs) -> Result<BatchReport> {
    if runs.is_empty() {
        return Err(Error::input("cost: no runs given"));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (name, hours) in runs {
        let run_inputs = CostInputs {
            wall_hours: *hours,
            ..inputs.clone()
        };
        rows.push(RunCost {
            name: name.clone(),
            wall_hours: *hours,
            report: report(&run_inputs)?,
        });
    }
    let total_wall_hours = rows.iter().map(|r| r.wall_hours).sum();
    let total_mwh = rows.iter().map(|r| round2(r.report.energy_mwh)).sum();
    let total_co2_kg = rows.iter().map(|r| r.report.co2_kg).sum();
    let total_gpu_hours = rows.iter().map(|r| r.report.gpu_hours).sum();
    let total_price = rows.iter().map(|r| r.report.price).sum();
    Ok(BatchReport {
        rows,
        total_wall_hours,
        total_mwh,
        total_co2_kg,
        total_gpu_hours,
        total_price,
        currency: inputs.currency.clone(),
    })
}

/// Parse `name wall_hours` rows. Blank lines and `#` comments are skipped; a
/// header row whose second field is not numeric is skipped too.
pub fn parse_runs(text: &str) -> Result<Vec<(String, f64)>> {
    let mut runs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == '\t' || c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 2 {
            return Err(Error::input(format!(
                "runs line {}: expected 2 fields (name, wall_hours), got {}",
                i + 1,
                fields.len()
            )));
        }
        match fields[1].parse::<f64>() {
            Ok(h) => runs.push((fields[0].to_string(), h)),
            Err(_) if runs.is_empty() && i == 0 => continue,
            Err(_) => {
                return Err(Error::input(format!(
                    "runs line {}: wall_hours '{}' is not a number",
                    i + 1,
                    fields[1]
                )))
            }
        }
    }
    Ok(runs)
}

impl BatchReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "model\twall_hours\tmwh\tco2_kg\tgpu_hours\tprice_{}\n",
            self.currency
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.0}",
                r.name,
                r.wall_hours,
                round2(r.report.energy_mwh),
                r.report.co2_kg,
                r.report.gpu_hours,
                r.report.price
            );
        }
        let _ = writeln!(
            out,
            "Total\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.0}",
            self.total_wall_hours,
            self.total_mwh,
            self.total_co2_kg,
            self.total_gpu_hours,
            self.total_price
        );
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max("Total".len());
        let mut out = format!(
            "{:<width$}  {:>10}  {:>7}  {:>9}  {:>10}  {:>10}\n",
            "Model", "Wall (h)", "MWh", "CO2eq kg", "GPU-h", self.currency
        );
        let line = |out: &mut String, name: &str, h: f64, mwh: f64, co2: f64, gh: f64, p: f64| {
            let _ = writeln!(
                out,
                "{name:<width$}  {h:>10.2}  {mwh:>7.2}  {co2:>9.2}  {gh:>10.2}  {p:>10.0}"
            );
        };
        for r in &self.rows {
            line(
                &mut out,
                &r.name,
                r.wall_hours,
                round2(r.report.energy_mwh),
                r.report.co2_kg,
                r.report.gpu_hours,
                r.report.price,
            );
        }
        line(
            &mut out,
            "Total",
            self.total_wall_hours,
            self.total_mwh,
            self.total_co2_kg,
            self.total_gpu_hours,
            self.total_price,
        );
        out
    }
}
