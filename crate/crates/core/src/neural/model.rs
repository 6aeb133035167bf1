use super::cell::{
    gru_backward, gru_forward, lstm_backward, lstm_forward, mat_vec_acc, outer_acc, GruCache,
    LstmCache,
};
use super::{CellParams, GradientSet, ModelParams, ModelSpec};
use crate::error::{shape, Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone)]
enum DirTape {
    Lstm(Vec<LstmCache>),
    Gru(Vec<GruCache>),
}

impl DirTape {
    fn final_hidden(&self) -> &[f64] {
        match self {
            DirTape::Lstm(steps) => &steps.last().expect("non-empty window").h,
            DirTape::Gru(steps) => &steps.last().expect("non-empty window").h,
        }
    }
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    fingerprint: u64,
    window: Vec<f64>,
    lag: usize,
    input: usize,
    fwd: DirTape,
    bwd: Option<DirTape>,
    merged: Vec<f64>,
    prediction: Vec<f64>,
}

impl ForwardTape {
    pub fn prediction(&self) -> &[f64] {
        &self.prediction
    }

    /// Final hidden state of the forward direction and, when bidirectional,
    /// of the backward direction (before concatenation).
    pub fn final_states(&self) -> (&[f64], Option<&[f64]>) {
        (self.fwd.final_hidden(), self.bwd.as_ref().map(DirTape::final_hidden))
    }
}

fn check_model(spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    spec.validate()?;
    let dims = |c: &CellParams| -> Result<(usize, usize)> {
        if c.kind() != spec.cell {
            return Err(shape(format!(
                "spec wants {:?} cells, params hold {:?}",
                spec.cell,
                c.kind()
            )));
        }
        match c {
            CellParams::Lstm(p) => p.dims(),
            CellParams::Gru(p) => p.dims(),
        }
    };
    let want = (spec.input, spec.hidden);
    if dims(&params.forward)? != want {
        return Err(shape("forward cell dimensions do not match spec"));
    }
    match (&params.backward, spec.bidirectional) {
        (Some(b), true) => {
            if dims(b)? != want {
                return Err(shape("backward cell dimensions do not match spec"));
            }
        }
        (None, false) => {}
        _ => return Err(shape("bidirectional flag does not match parameters")),
    }
    if params.dense_w.shape() != [spec.dense_inputs(), spec.output]
        || params.dense_b.shape() != [spec.output]
    {
        return Err(shape("dense layer does not match spec"));
    }
    Ok(())
}

fn run_direction(
    spec: &ModelSpec,
    cell: &CellParams,
    window: &[f64],
    lag: usize,
    reversed: bool,
) -> DirTape {
    let d = spec.input;
    let h = spec.hidden;
    let step_x = |s: usize| {
        let t = if reversed { lag - 1 - s } else { s };
        &window[t * d..(t + 1) * d]
    };
    match cell {
        CellParams::Lstm(p) => {
            let mut steps: Vec<LstmCache> = Vec::with_capacity(lag);
            let zeros = vec![0.0; h];
            for s in 0..lag {
                let (hp, cp) = steps
                    .last()
                    .map_or((&zeros[..], &zeros[..]), |c| (&c.h[..], &c.c[..]));
                let next = lstm_forward(p, step_x(s), hp, cp, spec.activation);
                steps.push(next);
            }
            DirTape::Lstm(steps)
        }
        CellParams::Gru(p) => {
            let mut steps: Vec<GruCache> = Vec::with_capacity(lag);
            let zeros = vec![0.0; h];
            for s in 0..lag {
                let hp = steps.last().map_or(&zeros[..], |c| &c.h[..]);
                let next = gru_forward(p, step_x(s), hp, spec.activation);
                steps.push(next);
            }
            DirTape::Gru(steps)
        }
    }
}

pub(crate) fn forward_with_fingerprint(
    spec: &ModelSpec,
    params: &ModelParams,
    window: &[f64],
    fingerprint: u64,
) -> Result<ForwardTape> {
    let d = spec.input;
    if window.is_empty() || window.len() % d != 0 {
        return Err(shape(format!(
            "window of {} values is not a whole number of {d}-feature steps",
            window.len()
        )));
    }
    let lag = window.len() / d;
    let fwd = run_direction(spec, &params.forward, window, lag, false);
    let bwd = params
        .backward
        .as_ref()
        .map(|b| run_direction(spec, b, window, lag, true));
    let mut merged = fwd.final_hidden().to_vec();
    if let Some(b) = &bwd {
        merged.extend_from_slice(b.final_hidden());
    }
    let mut prediction = params.dense_b.values().to_vec();
    super::cell::vec_mat_acc(&mut prediction, &merged, params.dense_w.values());
    Ok(ForwardTape {
        fingerprint,
        window: window.to_vec(),
        lag,
        input: d,
        fwd,
        bwd,
        merged,
        prediction,
    })
}

/// Runs the model over a `lag × input` window starting from zero states.
/// The backward direction reads the window in reverse; final hidden states
/// are concatenated (forward first) and fed to the linear output layer.
pub fn forward(
    spec: &ModelSpec,
    params: &ModelParams,
    window: &Tensor,
) -> Result<(Tensor, ForwardTape)> {
    check_model(spec, params)?;
    let (lag, d) = window.dims2()?;
    if lag == 0 || d != spec.input {
        return Err(shape(format!(
            "window must be lag × {} with lag >= 1, got {:?}",
            spec.input,
            window.shape()
        )));
    }
    let tape = forward_with_fingerprint(spec, params, window.values(), params.fingerprint())?;
    Ok((Tensor::from_vec(tape.prediction.clone()), tape))
}

/// Prediction only.
pub fn predict(spec: &ModelSpec, params: &ModelParams, window: &Tensor) -> Result<Tensor> {
    forward(spec, params, window).map(|(p, _)| p)
}

/// Mean absolute error over output coordinates.
pub fn mae_loss(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / prediction.len() as f64
}

fn backprop_direction(
    spec: &ModelSpec,
    cell: &CellParams,
    tape: &DirTape,
    window: &[f64],
    input: usize,
    reversed: bool,
    dh_final: &[f64],
    grads: &mut CellParams,
) {
    let lag = window.len() / input;
    let step_x = |s: usize| {
        let t = if reversed { lag - 1 - s } else { s };
        &window[t * input..(t + 1) * input]
    };
    match (cell, tape, grads) {
        (CellParams::Lstm(p), DirTape::Lstm(steps), CellParams::Lstm(g)) => {
            let mut dh = dh_final.to_vec();
            let mut dc = vec![0.0; dh.len()];
            for s in (0..steps.len()).rev() {
                let (a, b) = lstm_backward(p, &steps[s], step_x(s), &dh, &dc, spec.activation, g);
                dh = a;
                dc = b;
            }
        }
        (CellParams::Gru(p), DirTape::Gru(steps), CellParams::Gru(g)) => {
            let mut dh = dh_final.to_vec();
            for s in (0..steps.len()).rev() {
                dh = gru_backward(p, &steps[s], step_x(s), &dh, spec.activation, g);
            }
        }
        _ => unreachable!("tape and parameters were checked to share a cell kind"),
    }
}

/// Adds `weight ×` the per-example MAE gradient into `grads` and returns the
/// example's loss.
pub(crate) fn accumulate_gradients(
    spec: &ModelSpec,
    params: &ModelParams,
    tape: &ForwardTape,
    target: &[f64],
    weight: f64,
    grads: &mut GradientSet,
) -> Result<f64> {
    if target.len() != spec.output {
        return Err(shape(format!(
            "target has {} entries, model outputs {}",
            target.len(),
            spec.output
        )));
    }
    let out = spec.output as f64;
    // Subgradient of |r| taken as 0 at r = 0.
    let dy: Vec<f64> = tape
        .prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            let s = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            weight * s / out
        })
        .collect();
    outer_acc(grads.dense_w.values_mut(), &tape.merged, &dy);
    grads
        .dense_b
        .values_mut()
        .iter_mut()
        .zip(&dy)
        .for_each(|(g, d)| *g += d);
    let mut dmerged = vec![0.0; tape.merged.len()];
    mat_vec_acc(&mut dmerged, params.dense_w.values(), &dy);

    let h = spec.hidden;
    backprop_direction(
        spec,
        &params.forward,
        &tape.fwd,
        &tape.window,
        tape.input,
        false,
        &dmerged[..h],
        &mut grads.forward,
    );
    if let (Some(cell), Some(bt), Some(g)) = (&params.backward, &tape.bwd, &mut grads.backward) {
        backprop_direction(spec, cell, bt, &tape.window, tape.input, true, &dmerged[h..], g);
    }
    debug_assert_eq!(tape.lag * tape.input, tape.window.len());
    Ok(mae_loss(&tape.prediction, target))
}

/// Exact gradient of the per-example MAE with respect to every parameter.
pub fn backward(
    spec: &ModelSpec,
    params: &ModelParams,
    tape: &ForwardTape,
    target: &Tensor,
) -> Result<GradientSet> {
    check_model(spec, params)?;
    if tape.fingerprint != params.fingerprint() {
        return Err(Error::InvalidState(
            "tape was recorded with different parameters".into(),
        ));
    }
    let mut grads = params.zeros_like();
    accumulate_gradients(spec, params, tape, target.values(), 1.0, &mut grads)?;
    Ok(grads)
}
