//! Predictive perception: a fixed random convolutional encoder that maps
//! frames to a coarse feature grid, and a trainable per-cell recurrent
//! predictor whose next-frame prediction errors provide both the learning
//! signal and the uncertainty map that drives the controller.
//!
//! The encoder is deliberately frozen (seeded random weights, never
//! trained): it gives a stable feature space so that prediction error is
//! attributable to world dynamics rather than to representation drift.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{
    all_finite, init_weights, GruBackScratch, GruCache, GruCell, GruGrads, Linear, LinearGrads,
};

/// Dense feature grid. Storage is cell-major: the channel vector of cell
/// `(i, j)` occupies `data[(i*w + j)*d .. (i*w + j + 1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, d: usize) -> FeatureMap {
        FeatureMap { h, w, d, data: vec![0.0; h * w * d] }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.w + j) * self.d;
        &self.data[base..base + self.d]
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }

    fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.h, self.w, self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionConfig {
    /// Feature grid height.
    pub feat_h: usize,
    /// Feature grid width.
    pub feat_w: usize,
    /// Channels per grid cell.
    pub feat_d: usize,
    /// Softmax temperature for the uncertainty map. Must sit at the scale
    /// of per-cell error *differences* (~1e-3 for a converged predictor on
    /// 64px frames), or the map degenerates to uniform and the controller
    /// cannot see where the surprise is.
    pub tau: f64,
    /// SGD step size for the predictor.
    pub learn_rate: f64,
    /// Recurrent state width of the per-cell predictor.
    pub hidden_dim: usize,
    /// Seed for the frozen random encoder weights.
    pub encoder_seed: u64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            feat_h: 7,
            feat_w: 7,
            feat_d: 16,
            tau: 1e-3,
            learn_rate: 1e-2,
            hidden_dim: 32,
            encoder_seed: 7,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_h == 0 {
            return Err(Error::config("feat_h", "must be >= 1"));
        }
        if self.feat_w == 0 {
            return Err(Error::config("feat_w", "must be >= 1"));
        }
        if self.feat_d == 0 {
            return Err(Error::config("feat_d", "must be >= 1"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", "must be finite and > 0"));
        }
        if !(self.learn_rate >= 0.0) || !self.learn_rate.is_finite() {
            return Err(Error::config("learn_rate", "must be finite and >= 0"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be >= 1"));
        }
        Ok(())
    }
}

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_CH1: usize = 8;
const CONV_CH2: usize = 16;

/// One valid-padding strided convolution layer with tanh activation.
#[derive(Debug, Clone)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    /// Weights indexed `[out_ch][in_ch][ky][kx]`, flattened.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Conv {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Conv {
        let k2 = CONV_KERNEL * CONV_KERNEL;
        let fan_in = in_ch * k2;
        Conv {
            in_ch,
            out_ch,
            w: init_weights(rng, out_ch * in_ch * k2, fan_in),
            b: vec![0.0; out_ch],
        }
    }

    fn out_size(in_size: usize) -> usize {
        (in_size - CONV_KERNEL) / CONV_STRIDE + 1
    }

    /// Input is `[in_ch][h][w]` flattened; returns `[out_ch][oh][ow]`.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let oh = Conv::out_size(h);
        let ow = Conv::out_size(w);
        let mut out = vec![0.0; self.out_ch * oh * ow];
        let k = CONV_KERNEL;
        for oc in 0..self.out_ch {
            let w_oc = &self.w[oc * self.in_ch * k * k..(oc + 1) * self.in_ch * k * k];
            for oy in 0..oh {
                let iy0 = oy * CONV_STRIDE;
                for ox in 0..ow {
                    let ix0 = ox * CONV_STRIDE;
                    let mut acc = self.b[oc];
                    for ic in 0..self.in_ch {
                        let plane = &input[ic * h * w..(ic + 1) * h * w];
                        let wk = &w_oc[ic * k * k..(ic + 1) * k * k];
                        for ky in 0..k {
                            let row = &plane[(iy0 + ky) * w + ix0..(iy0 + ky) * w + ix0 + k];
                            acc += wk[ky * k] * row[0]
                                + wk[ky * k + 1] * row[1]
                                + wk[ky * k + 2] * row[2];
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc.tanh();
                }
            }
        }
        (out, oh, ow)
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    fn read_params(&mut self, data: &[f64], pos: &mut usize) {
        let wl = self.w.len();
        self.w.copy_from_slice(&data[*pos..*pos + wl]);
        *pos += wl;
        let bl = self.b.len();
        self.b.copy_from_slice(&data[*pos..*pos + bl]);
        *pos += bl;
    }
}

/// Frozen random feature extractor: three strided tanh convolutions
/// followed by adaptive average pooling down to the configured grid.
#[derive(Debug, Clone)]
pub struct Encoder {
    in_px: usize,
    feat_h: usize,
    feat_w: usize,
    feat_d: usize,
    convs: [Conv; 3],
}

impl Encoder {
    pub fn new(frame_px: usize, cfg: &PerceptionConfig) -> Result<Encoder> {
        cfg.validate()?;
        if frame_px < CONV_KERNEL {
            return Err(Error::config("frame_px", "too small for the three-stage encoder"));
        }
        let s1 = Conv::out_size(frame_px);
        if s1 < CONV_KERNEL || Conv::out_size(s1) < CONV_KERNEL {
            return Err(Error::config("frame_px", "too small for the three-stage encoder"));
        }
        let s3 = Conv::out_size(Conv::out_size(s1));
        if s3 < cfg.feat_h || s3 < cfg.feat_w {
            return Err(Error::config(
                "feat_h/feat_w",
                format!("feature grid {}x{} exceeds encoder output {s3}x{s3}", cfg.feat_h, cfg.feat_w),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder_seed);
        let convs = [
            Conv::new(&mut rng, 1, CONV_CH1),
            Conv::new(&mut rng, CONV_CH1, CONV_CH2),
            Conv::new(&mut rng, CONV_CH2, cfg.feat_d),
        ];
        Ok(Encoder { in_px: frame_px, feat_h: cfg.feat_h, feat_w: cfg.feat_w, feat_d: cfg.feat_d, convs })
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.feat_h, self.feat_w, self.feat_d)
    }

    pub fn input_px(&self) -> usize {
        self.in_px
    }

    /// Maps a frame to features. Pure: identical frames give identical maps.
    pub fn encode(&self, obs: &Observation) -> Result<FeatureMap> {
        if obs.px != self.in_px || obs.data.len() != self.in_px * self.in_px {
            return Err(Error::shape(
                format!("{px}x{px} frame", px = self.in_px),
                format!("{}x{} ({} values)", obs.px, obs.px, obs.data.len()),
            ));
        }
        let (a1, h1, w1) = self.convs[0].forward(&obs.data, self.in_px, self.in_px);
        let (a2, h2, w2) = self.convs[1].forward(&a1, h1, w1);
        let (a3, h3, w3) = self.convs[2].forward(&a2, h2, w2);
        Ok(self.pool(&a3, h3, w3))
    }

    /// Adaptive average pooling from `[d][h][w]` planes to the cell-major
    /// feature grid. Output bin `i` covers input rows
    /// `[floor(i*h/out_h), ceil((i+1)*h/out_h))`.
    fn pool(&self, planes: &[f64], h: usize, w: usize) -> FeatureMap {
        let (fh, fw, d) = (self.feat_h, self.feat_w, self.feat_d);
        let mut out = FeatureMap::zeros(fh, fw, d);
        for i in 0..fh {
            let y0 = i * h / fh;
            let y1 = ((i + 1) * h).div_ceil(fh);
            for j in 0..fw {
                let x0 = j * w / fw;
                let x1 = ((j + 1) * w).div_ceil(fw);
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..d {
                    let plane = &planes[c * h * w..(c + 1) * h * w];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += plane[y * w + x];
                        }
                    }
                    out.data[(i * fw + j) * d + c] = acc / area;
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for c in &self.convs {
            c.write_params(out);
        }
    }

    pub fn read_params(&mut self, data: &[f64], pos: &mut usize) {
        for c in &mut self.convs {
            c.read_params(data, pos);
        }
    }
}

/// Squared prediction error, summed over channels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionError {
    pub h: usize,
    pub w: usize,
    /// Row-major per-cell channel-summed squared error.
    pub per_cell: Vec<f64>,
    /// Sum of `per_cell`: the full squared-error loss.
    pub total: f64,
}

/// Computes `||observed - predicted||^2` per cell and in total.
pub fn prediction_error(observed: &FeatureMap, predicted: &FeatureMap) -> Result<PredictionError> {
    if !observed.same_shape(predicted) {
        return Err(Error::shape(observed.shape_string(), predicted.shape_string()));
    }
    let cells = observed.cells();
    let d = observed.d;
    let mut per_cell = vec![0.0; cells];
    let mut total = 0.0;
    for c in 0..cells {
        let mut acc = 0.0;
        for k in 0..d {
            let diff = observed.data[c * d + k] - predicted.data[c * d + k];
            acc += diff * diff;
        }
        per_cell[c] = acc;
        total += acc;
    }
    Ok(PredictionError { h: observed.h, w: observed.w, per_cell, total })
}

/// Softmax of `per_cell / tau` over all cells jointly, computed with
/// max-subtraction for numerical stability. Sums to exactly the floating
/// point normalisation of its terms; every entry is positive.
pub fn uncertainty_map(err: &PredictionError, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config("tau", "must be finite and > 0"));
    }
    if err.per_cell.is_empty() {
        return Err(Error::Usage("uncertainty map of an empty error grid".into()));
    }
    let m = err.per_cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = err.per_cell.iter().map(|e| ((e - m) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    Ok(out)
}

/// Row-major argmax over a grid; ties resolve to the smallest row-major
/// index, i.e. the first maximum encountered.
pub fn argmax_cell(values: &[f64], w: usize) -> (usize, usize) {
    let mut best = 0;
    for (idx, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = idx;
        }
    }
    (best / w, best % w)
}

/// Everything `Predictor::train_step` reports about one frame.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Squared-error loss of the prediction made before seeing the frame.
    pub loss: f64,
    pub errors: PredictionError,
    /// True when non-finite gradients forced the update to be skipped.
    pub skipped_update: bool,
}

/// Cached forward pass of the most recent recurrent step, kept so the next
/// frame's loss can be backpropagated one step (truncated: the older hidden
/// state is treated as a constant).
#[derive(Debug, Clone)]
struct LastStep {
    x: Vec<f64>,
    h_pre: Vec<f64>,
    caches: Vec<GruCache>,
    from_zero: bool,
}

/// Per-cell recurrent next-frame predictor with shared weights: one GRU
/// cell and one linear readout applied independently at every grid cell.
#[derive(Debug, Clone)]
pub struct Predictor {
    feat_h: usize,
    feat_w: usize,
    feat_d: usize,
    hidden_dim: usize,
    learn_rate: f64,
    gru: GruCell,
    readout: Linear,
    /// Current hidden state, `cells * hidden_dim`.
    hidden: Vec<f64>,
    last_step: Option<LastStep>,
}

impl Predictor {
    pub fn new(cfg: &PerceptionConfig, seed: u64) -> Result<Predictor> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gru = GruCell::new(&mut rng, cfg.feat_d, cfg.hidden_dim);
        let readout = Linear::new(&mut rng, cfg.hidden_dim, cfg.feat_d);
        let cells = cfg.feat_h * cfg.feat_w;
        Ok(Predictor {
            feat_h: cfg.feat_h,
            feat_w: cfg.feat_w,
            feat_d: cfg.feat_d,
            hidden_dim: cfg.hidden_dim,
            learn_rate: cfg.learn_rate,
            gru,
            readout,
            hidden: vec![0.0; cells * cfg.hidden_dim],
            last_step: None,
        })
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.feat_h, self.feat_w, self.feat_d)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn learn_rate(&self) -> f64 {
        self.learn_rate
    }

    pub fn set_learn_rate(&mut self, lr: f64) {
        self.learn_rate = lr;
    }

    /// Clears the recurrent state (episode boundary). The next prediction
    /// is the readout of the zero state, i.e. the readout bias.
    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
        self.last_step = None;
    }

    /// The prediction for the next frame given everything seen so far.
    pub fn predict(&self) -> FeatureMap {
        let cells = self.feat_h * self.feat_w;
        let mut out = FeatureMap::zeros(self.feat_h, self.feat_w, self.feat_d);
        for c in 0..cells {
            let h = &self.hidden[c * self.hidden_dim..(c + 1) * self.hidden_dim];
            self.readout.forward(h, &mut out.data[c * self.feat_d..(c + 1) * self.feat_d]);
        }
        out
    }

    fn check_shape(&self, f: &FeatureMap) -> Result<()> {
        if f.h != self.feat_h || f.w != self.feat_w || f.d != self.feat_d {
            return Err(Error::shape(
                format!("{}x{}x{}", self.feat_h, self.feat_w, self.feat_d),
                f.shape_string(),
            ));
        }
        Ok(())
    }

    /// Advances the recurrent state with an observed frame, caching the
    /// forward pass for a potential later backward step.
    fn advance(&mut self, observed: &FeatureMap) {
        let cells = self.feat_h * self.feat_w;
        let hd = self.hidden_dim;
        let from_zero = self.last_step.is_none();
        let h_pre = self.hidden.clone();
        let mut caches: Vec<GruCache> = (0..cells).map(|_| GruCache::new(hd)).collect();
        let mut h_next = vec![0.0; hd];
        for c in 0..cells {
            let x = observed.cell(c / self.feat_w, c % self.feat_w);
            if from_zero {
                self.gru.step_from_zero(x, &mut h_next, &mut caches[c]);
            } else {
                let h_cell = &h_pre[c * hd..(c + 1) * hd];
                self.gru.step(x, h_cell, &mut h_next, &mut caches[c]);
            }
            self.hidden[c * hd..(c + 1) * hd].copy_from_slice(&h_next);
        }
        self.last_step = Some(LastStep { x: observed.data.clone(), h_pre, caches, from_zero });
    }

    /// Scores the current prediction against an observed frame and advances
    /// the recurrent state, without touching any parameters.
    pub fn observe(&mut self, observed: &FeatureMap) -> Result<PredictionError> {
        self.check_shape(observed)?;
        let errors = prediction_error(observed, &self.predict())?;
        self.advance(observed);
        Ok(errors)
    }

    /// One online training step: scores the standing prediction against the
    /// newly observed frame, backpropagates the squared error through the
    /// readout and one recurrent step (the pre-step hidden state is held
    /// constant), applies SGD, then advances the recurrent state with the
    /// updated parameters.
    ///
    /// Non-finite gradients never reach the parameters: the update is
    /// skipped and reported via `skipped_update` so the caller can log it
    /// and continue.
    pub fn train_step(&mut self, observed: &FeatureMap) -> Result<TrainOutcome> {
        self.check_shape(observed)?;
        let cells = self.feat_h * self.feat_w;
        let d = self.feat_d;
        let hd = self.hidden_dim;

        let predicted = self.predict();
        let errors = prediction_error(observed, &predicted)?;

        let mut ro_grads = LinearGrads::zeros_like(&self.readout);
        let mut gru_grads = GruGrads::zeros_like(&self.gru);
        let mut scratch = GruBackScratch::new(hd);
        let mut dpred = vec![0.0; d];
        let mut dh = vec![0.0; hd];
        for c in 0..cells {
            for k in 0..d {
                dpred[k] = 2.0 * (predicted.data[c * d + k] - observed.data[c * d + k]);
            }
            let h_cell = &self.hidden[c * hd..(c + 1) * hd];
            dh.iter_mut().for_each(|v| *v = 0.0);
            self.readout.backward(h_cell, &dpred, &mut ro_grads, Some(&mut dh));
            if let Some(last) = &self.last_step {
                let x = &last.x[c * d..(c + 1) * d];
                if last.from_zero {
                    self.gru.backward_from_zero(x, &last.caches[c], &dh, &mut gru_grads, &mut scratch);
                } else {
                    let h_pre = &last.h_pre[c * hd..(c + 1) * hd];
                    self.gru.backward_truncated(
                        x,
                        h_pre,
                        &last.caches[c],
                        &dh,
                        &mut gru_grads,
                        &mut scratch,
                        None,
                    );
                }
            }
        }

        let finite = ro_grads.is_finite() && gru_grads.is_finite();
        if finite {
            self.readout.apply_sgd(&ro_grads, self.learn_rate);
            self.gru.apply_sgd(&gru_grads, self.learn_rate);
        }
        self.advance(observed);
        Ok(TrainOutcome { loss: errors.total, errors, skipped_update: !finite })
    }

    /// Flat copy of the current hidden state (`cells * hidden_dim`).
    pub fn hidden_state(&self) -> Vec<f64> {
        self.hidden.clone()
    }

    pub fn param_count(&self) -> usize {
        self.gru.param_count() + self.readout.param_count()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.gru.write_params(out);
        self.readout.write_params(out);
    }

    pub fn read_params(&mut self, data: &[f64], pos: &mut usize) {
        self.gru.read_params(data, pos);
        self.readout.read_params(data, pos);
    }

    pub fn params_finite(&self) -> bool {
        let mut buf = Vec::with_capacity(self.param_count());
        self.write_params(&mut buf);
        all_finite(&buf)
    }

    #[cfg(test)]
    fn readout_mut(&mut self) -> &mut Linear {
        &mut self.readout
    }
}
