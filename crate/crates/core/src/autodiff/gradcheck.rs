use super::{NumericsError, Tape, Tensor, Var};

/// Finite-difference settings. Central differences in 64-bit.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor in the relative error, so entries whose true
    /// gradient is ~0 are compared on an absolute scale.
    pub floor: f64,
    /// Upper bound on perturbed elements per input; larger inputs are probed
    /// at evenly spaced positions.
    pub max_probes: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-4,
            floor: 1e-4,
            max_probes: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_positions(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Compares caller-supplied analytic gradients against central differences of
/// `value`.
pub fn check_gradients(
    inputs: &[(String, Tensor<f64>)],
    analytic: &[Vec<f64>],
    mut value: impl FnMut(&[Tensor<f64>]) -> f64,
    cfg: GradCheckConfig,
) -> GradCheckReport {
    let mut current: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut params = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let probes = probe_positions(t.len(), cfg.max_probes);
        for &i in &probes {
            let orig = t.data()[i];
            current[k].data_mut()[i] = orig + cfg.step;
            let up = value(&current);
            current[k].data_mut()[i] = orig - cfg.step;
            let down = value(&current);
            current[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[k][i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(rel_err(a, numeric, cfg.floor));
        }
        params.push(ParamGradError {
            name: name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            probes: probes.len(),
        });
    }
    GradCheckReport { tol: cfg.tol, params }
}

/// Builds `f` on a fresh 64-bit tape, backpropagates, and checks every input.
///
/// `f` receives one trainable leaf per input, in order, and must return a
/// one-element value.
pub fn grad_check<F>(
    f: F,
    inputs: &[(String, Tensor<f64>)],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let run = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, out) = run(&base)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt_or_zero(v)).collect();
    let mut failure = None;
    let report = check_gradients(
        inputs,
        &analytic,
        |vals| match run(vals) {
            Ok((t, _, o)) => t.value(o).item(),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        cfg,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
