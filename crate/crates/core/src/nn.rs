//! Minimal dense-layer toolkit: a fully connected layer and a gated
//! recurrent cell with hand-written forward and backward passes.
//!
//! Everything operates on flat `f64` slices so parameter blocks can be
//! serialized, perturbed for finite-difference checks, and updated with
//! plain SGD without any indirection. Weight matrices are row-major with
//! one row per output unit.

use rand::Rng;

/// Dot product with four independent accumulators. The split keeps the
/// floating-point dependency chains short, which matters in the TD-update
/// inner loop, while staying bit-deterministic for a given slice length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < chunks {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// `out[o] = dot(w_row_o, x)` for a row-major `rows x cols` matrix.
pub(crate) fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = dot(&w[o * cols..(o + 1) * cols], x);
    }
}

/// `matvec` over several input vectors at once. Each weight row is
/// streamed from memory once per call instead of once per sample; every
/// `outs[s][o]` is the identical `dot(row_o, xs[s])` the per-sample path
/// computes, so results are bit-identical.
pub(crate) fn matvec_batch(w: &[f64], xs: &[&[f64]], outs: &mut [&mut [f64]]) {
    debug_assert_eq!(xs.len(), outs.len());
    if xs.is_empty() {
        return;
    }
    let cols = xs[0].len();
    let rows = outs[0].len();
    debug_assert_eq!(w.len(), rows * cols);
    for o in 0..rows {
        let row = &w[o * cols..(o + 1) * cols];
        for (x, out) in xs.iter().zip(outs.iter_mut()) {
            out[o] = dot(row, x);
        }
    }
}

/// `dx[i] += sum_o w[o][i] * dy[o]` (transposed matvec, accumulating).
pub(crate) fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    debug_assert_eq!(w.len(), dy.len() * cols);
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * cols..(o + 1) * cols];
        for (slot, &wi) in dx.iter_mut().zip(row) {
            *slot += wi * g;
        }
    }
}

/// `matvec_t_acc` over several samples; row-major like the batched
/// forward. For each sample, every `dx` element accumulates the same terms
/// in the same ascending-row order as the per-sample path (including the
/// zero-gradient skips), so results are bit-identical.
pub(crate) fn matvec_t_acc_batch(w: &[f64], dys: &[&[f64]], dxs: &mut [&mut [f64]]) {
    debug_assert_eq!(dys.len(), dxs.len());
    if dys.is_empty() {
        return;
    }
    let cols = dxs[0].len();
    let rows = dys[0].len();
    debug_assert_eq!(w.len(), rows * cols);
    for o in 0..rows {
        let row = &w[o * cols..(o + 1) * cols];
        for (dy, dx) in dys.iter().zip(dxs.iter_mut()) {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            for (slot, &wi) in dx.iter_mut().zip(row) {
                *slot += wi * g;
            }
        }
    }
}

/// Rank-one update `gw[o][i] += dy[o] * x[i]`.
pub(crate) fn outer_acc(gw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(gw.len(), dy.len() * cols);
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut gw[o * cols..(o + 1) * cols];
        for (slot, &xi) in row.iter_mut().zip(x) {
            *slot += g * xi;
        }
    }
}

/// `outer_acc` over several samples. Samples accumulate in ascending order
/// into every gradient element, exactly as sequential per-sample calls
/// would, so results are bit-identical while each gradient row stays
/// cache-resident across the whole batch.
pub(crate) fn outer_acc_batch(gw: &mut [f64], dys: &[&[f64]], xs: &[&[f64]]) {
    debug_assert_eq!(dys.len(), xs.len());
    if xs.is_empty() {
        return;
    }
    let cols = xs[0].len();
    let rows = dys[0].len();
    debug_assert_eq!(gw.len(), rows * cols);
    for o in 0..rows {
        let row = &mut gw[o * cols..(o + 1) * cols];
        for (dy, x) in dys.iter().zip(xs) {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            for (slot, &xi) in row.iter_mut().zip(*x) {
                *slot += g * xi;
            }
        }
    }
}

pub(crate) fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weights drawn uniformly from `[-s, s]` with `s = 1/sqrt(fan_in)`.
pub(crate) fn init_weights<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-s..=s)).collect()
}

// ---------------------------------------------------------------------------
// Fully connected layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
    pub(crate) w: Vec<f64>,
    pub(crate) b: Vec<f64>,
}

impl Linear {
    pub(crate) fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            w: init_weights(rng, in_dim * out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub(crate) fn forward(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.w, x, out);
        for (slot, b) in out.iter_mut().zip(&self.b) {
            *slot += b;
        }
    }

    /// `forward` over several samples; bit-identical, one weight pass.
    pub(crate) fn forward_batch(&self, xs: &[&[f64]], outs: &mut [&mut [f64]]) {
        matvec_batch(&self.w, xs, outs);
        for out in outs.iter_mut() {
            for (slot, b) in out.iter_mut().zip(&self.b) {
                *slot += b;
            }
        }
    }

    /// Accumulates parameter gradients for upstream gradient `dy`; when
    /// `dx` is provided, also accumulates the gradient w.r.t. the input.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        grads: &mut LinearGrads,
        dx: Option<&mut [f64]>,
    ) {
        outer_acc(&mut grads.w, dy, x);
        for (slot, &g) in grads.b.iter_mut().zip(dy) {
            *slot += g;
        }
        if let Some(dx) = dx {
            matvec_t_acc(&self.w, dy, dx);
        }
    }

    /// `backward` over several samples accumulated in ascending sample
    /// order — bit-identical to sequential per-sample calls.
    pub(crate) fn backward_batch(
        &self,
        xs: &[&[f64]],
        dys: &[&[f64]],
        grads: &mut LinearGrads,
        dxs: Option<&mut [&mut [f64]]>,
    ) {
        outer_acc_batch(&mut grads.w, dys, xs);
        for dy in dys {
            for (slot, &g) in grads.b.iter_mut().zip(*dy) {
                *slot += g;
            }
        }
        if let Some(dxs) = dxs {
            matvec_t_acc_batch(&self.w, dys, dxs);
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    pub(crate) fn read_params(&mut self, data: &[f64], pos: &mut usize) {
        let wl = self.w.len();
        self.w.copy_from_slice(&data[*pos..*pos + wl]);
        *pos += wl;
        let bl = self.b.len();
        self.b.copy_from_slice(&data[*pos..*pos + bl]);
        *pos += bl;
    }

    pub(crate) fn apply_sgd(&mut self, grads: &LinearGrads, lr: f64) {
        for (p, g) in self.w.iter_mut().zip(&grads.w) {
            *p -= lr * g;
        }
        for (p, g) in self.b.iter_mut().zip(&grads.b) {
            *p -= lr * g;
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LinearGrads {
    pub(crate) w: Vec<f64>,
    pub(crate) b: Vec<f64>,
}

impl LinearGrads {
    pub(crate) fn zeros_like(layer: &Linear) -> Self {
        LinearGrads { w: vec![0.0; layer.w.len()], b: vec![0.0; layer.b.len()] }
    }

    pub(crate) fn clear(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }

    pub(crate) fn add_assign(&mut self, other: &LinearGrads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }

    pub(crate) fn is_finite(&self) -> bool {
        all_finite(&self.w) && all_finite(&self.b)
    }
}

// ---------------------------------------------------------------------------
// Gated recurrent cell
// ---------------------------------------------------------------------------

/// Single-step gated recurrent cell:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)        update gate
/// r  = sigmoid(Wr x + Ur h + br)        reset gate
/// g  = tanh(Wh x + Uh (r .* h) + bh)    candidate
/// h' = (1 - z) .* h + z .* g
/// ```
///
/// With zero biases the cell maps the origin to the origin, so a freshly
/// initialized stack predicts exactly zero from zero input and zero state.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GruCell {
    pub(crate) in_dim: usize,
    pub(crate) hidden: usize,
    pub(crate) wz: Vec<f64>,
    pub(crate) uz: Vec<f64>,
    pub(crate) bz: Vec<f64>,
    pub(crate) wr: Vec<f64>,
    pub(crate) ur: Vec<f64>,
    pub(crate) br: Vec<f64>,
    pub(crate) wh: Vec<f64>,
    pub(crate) uh: Vec<f64>,
    pub(crate) bh: Vec<f64>,
}

/// Forward-pass intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GruCache {
    pub(crate) z: Vec<f64>,
    pub(crate) r: Vec<f64>,
    pub(crate) g: Vec<f64>,
    pub(crate) rh: Vec<f64>,
}

impl GruCache {
    pub(crate) fn new(hidden: usize) -> Self {
        GruCache {
            z: vec![0.0; hidden],
            r: vec![0.0; hidden],
            g: vec![0.0; hidden],
            rh: vec![0.0; hidden],
        }
    }
}

impl GruCell {
    pub(crate) fn new<R: Rng>(rng: &mut R, in_dim: usize, hidden: usize) -> Self {
        GruCell {
            in_dim,
            hidden,
            wz: init_weights(rng, hidden * in_dim, in_dim),
            uz: init_weights(rng, hidden * hidden, hidden),
            bz: vec![0.0; hidden],
            wr: init_weights(rng, hidden * in_dim, in_dim),
            ur: init_weights(rng, hidden * hidden, hidden),
            br: vec![0.0; hidden],
            wh: init_weights(rng, hidden * in_dim, in_dim),
            uh: init_weights(rng, hidden * hidden, hidden),
            bh: vec![0.0; hidden],
        }
    }

    /// One recurrent step. `h_next` may not alias `h`.
    pub(crate) fn step(&self, x: &[f64], h: &[f64], h_next: &mut [f64], cache: &mut GruCache) {
        let n = self.hidden;
        matvec(&self.wz, x, &mut cache.z);
        matvec_t_gate(&self.uz, h, &mut cache.z);
        matvec(&self.wr, x, &mut cache.r);
        matvec_t_gate(&self.ur, h, &mut cache.r);
        for i in 0..n {
            cache.z[i] = sigmoid(cache.z[i] + self.bz[i]);
            cache.r[i] = sigmoid(cache.r[i] + self.br[i]);
            cache.rh[i] = cache.r[i] * h[i];
        }
        matvec(&self.wh, x, &mut cache.g);
        matvec_t_gate(&self.uh, &cache.rh, &mut cache.g);
        for i in 0..n {
            cache.g[i] = (cache.g[i] + self.bh[i]).tanh();
            h_next[i] = (1.0 - cache.z[i]) * h[i] + cache.z[i] * cache.g[i];
        }
    }

    /// Step from the all-zero state. The reset path and every `U*` term
    /// vanish identically there, so only `Wz`/`Wh` participate; the output
    /// equals `step(x, 0, ..)` exactly while skipping the dead arithmetic.
    pub(crate) fn step_from_zero(&self, x: &[f64], h_next: &mut [f64], cache: &mut GruCache) {
        let n = self.hidden;
        matvec(&self.wz, x, &mut cache.z);
        matvec(&self.wh, x, &mut cache.g);
        for i in 0..n {
            cache.z[i] = sigmoid(cache.z[i] + self.bz[i]);
            cache.r[i] = sigmoid(self.br[i]);
            cache.rh[i] = 0.0;
            cache.g[i] = (cache.g[i] + self.bh[i]).tanh();
            h_next[i] = cache.z[i] * cache.g[i];
        }
    }

    /// `step_from_zero` over several samples at once. Each weight row is
    /// streamed through the cache once for the whole group instead of once
    /// per sample; each output element is the same `dot` call as in the
    /// scalar path, so results are bit-identical.
    pub(crate) fn step_from_zero_batch(
        &self,
        xs: &[&[f64]],
        h_nexts: &mut [&mut [f64]],
        caches: &mut [&mut GruCache],
    ) {
        let n = self.hidden;
        {
            let mut zs: Vec<&mut [f64]> = caches.iter_mut().map(|c| c.z.as_mut_slice()).collect();
            matvec_batch(&self.wz, xs, &mut zs);
        }
        {
            let mut gs: Vec<&mut [f64]> = caches.iter_mut().map(|c| c.g.as_mut_slice()).collect();
            matvec_batch(&self.wh, xs, &mut gs);
        }
        for (cache, h_next) in caches.iter_mut().zip(h_nexts.iter_mut()) {
            for i in 0..n {
                cache.z[i] = sigmoid(cache.z[i] + self.bz[i]);
                cache.r[i] = sigmoid(self.br[i]);
                cache.rh[i] = 0.0;
                cache.g[i] = (cache.g[i] + self.bh[i]).tanh();
                h_next[i] = cache.z[i] * cache.g[i];
            }
        }
    }

    /// Backward through one step, truncated at `h`: gradients flow into the
    /// parameters (and optionally the input) but not into the previous state.
    pub(crate) fn backward_truncated(
        &self,
        x: &[f64],
        h: &[f64],
        cache: &GruCache,
        dh_next: &[f64],
        grads: &mut GruGrads,
        scratch: &mut GruBackScratch,
        dx: Option<&mut [f64]>,
    ) {
        let n = self.hidden;
        for i in 0..n {
            let dz = dh_next[i] * (cache.g[i] - h[i]);
            let dg = dh_next[i] * cache.z[i];
            scratch.dah[i] = dg * (1.0 - cache.g[i] * cache.g[i]);
            scratch.daz[i] = dz * cache.z[i] * (1.0 - cache.z[i]);
        }
        outer_acc(&mut grads.wh, &scratch.dah, x);
        outer_acc(&mut grads.uh, &scratch.dah, &cache.rh);
        for i in 0..n {
            grads.bh[i] += scratch.dah[i];
        }
        // d(r .* h) -> reset gate chain.
        scratch.drh.fill(0.0);
        matvec_t_acc(&self.uh, &scratch.dah, &mut scratch.drh);
        for i in 0..n {
            let dr = scratch.drh[i] * h[i];
            scratch.dar[i] = dr * cache.r[i] * (1.0 - cache.r[i]);
        }
        outer_acc(&mut grads.wr, &scratch.dar, x);
        outer_acc(&mut grads.ur, &scratch.dar, h);
        for i in 0..n {
            grads.br[i] += scratch.dar[i];
        }
        outer_acc(&mut grads.wz, &scratch.daz, x);
        outer_acc(&mut grads.uz, &scratch.daz, h);
        for i in 0..n {
            grads.bz[i] += scratch.daz[i];
        }
        if let Some(dx) = dx {
            matvec_t_acc(&self.wh, &scratch.dah, dx);
            matvec_t_acc(&self.wr, &scratch.dar, dx);
            matvec_t_acc(&self.wz, &scratch.daz, dx);
        }
    }

    /// Backward for a `step_from_zero` call. With `h = 0` the gradients of
    /// `Uz`, `Wr`, `Ur`, `br`, and `Uh` are identically zero, so only the
    /// live blocks are touched.
    pub(crate) fn backward_from_zero(
        &self,
        x: &[f64],
        cache: &GruCache,
        dh_next: &[f64],
        grads: &mut GruGrads,
        scratch: &mut GruBackScratch,
    ) {
        let n = self.hidden;
        for i in 0..n {
            let dz = dh_next[i] * cache.g[i];
            let dg = dh_next[i] * cache.z[i];
            scratch.dah[i] = dg * (1.0 - cache.g[i] * cache.g[i]);
            scratch.daz[i] = dz * cache.z[i] * (1.0 - cache.z[i]);
        }
        outer_acc(&mut grads.wh, &scratch.dah, x);
        outer_acc(&mut grads.wz, &scratch.daz, x);
        for i in 0..n {
            grads.bh[i] += scratch.dah[i];
            grads.bz[i] += scratch.daz[i];
        }
    }

    /// `backward_from_zero` over several samples, accumulating every gradient
    /// element in ascending sample order — bit-identical to sequential
    /// per-sample calls while touching each weight-gradient row once.
    pub(crate) fn backward_from_zero_batch(
        &self,
        xs: &[&[f64]],
        caches: &[&GruCache],
        dh_nexts: &[&[f64]],
        grads: &mut GruGrads,
        scratches: &mut [&mut GruBackScratch],
    ) {
        let n = self.hidden;
        for ((cache, dh_next), scratch) in
            caches.iter().zip(dh_nexts).zip(scratches.iter_mut())
        {
            for i in 0..n {
                let dz = dh_next[i] * cache.g[i];
                let dg = dh_next[i] * cache.z[i];
                scratch.dah[i] = dg * (1.0 - cache.g[i] * cache.g[i]);
                scratch.daz[i] = dz * cache.z[i] * (1.0 - cache.z[i]);
            }
        }
        {
            let dahs: Vec<&[f64]> = scratches.iter().map(|s| s.dah.as_slice()).collect();
            outer_acc_batch(&mut grads.wh, &dahs, xs);
        }
        {
            let dazs: Vec<&[f64]> = scratches.iter().map(|s| s.daz.as_slice()).collect();
            outer_acc_batch(&mut grads.wz, &dazs, xs);
        }
        for scratch in scratches.iter() {
            for i in 0..n {
                grads.bh[i] += scratch.dah[i];
                grads.bz[i] += scratch.daz[i];
            }
        }
    }

    pub(crate) fn param_count(&self) -> usize {
        self.wz.len() * 3 + self.uz.len() * 3 + self.bz.len() * 3
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        for block in [
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh,
            &self.bh,
        ] {
            out.extend_from_slice(block);
        }
    }

    pub(crate) fn read_params(&mut self, data: &[f64], pos: &mut usize) {
        for block in [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wh,
            &mut self.uh,
            &mut self.bh,
        ] {
            let len = block.len();
            block.copy_from_slice(&data[*pos..*pos + len]);
            *pos += len;
        }
    }

    pub(crate) fn apply_sgd(&mut self, grads: &GruGrads, lr: f64) {
        for (params, gs) in [
            (&mut self.wz, &grads.wz),
            (&mut self.uz, &grads.uz),
            (&mut self.bz, &grads.bz),
            (&mut self.wr, &grads.wr),
            (&mut self.ur, &grads.ur),
            (&mut self.br, &grads.br),
            (&mut self.wh, &grads.wh),
            (&mut self.uh, &grads.uh),
            (&mut self.bh, &grads.bh),
        ] {
            for (p, g) in params.iter_mut().zip(gs) {
                *p -= lr * g;
            }
        }
    }
}

/// `out[i] += dot(u_row_i, h)` -- gate pre-activation accumulation.
fn matvec_t_gate(u: &[f64], h: &[f64], out: &mut [f64]) {
    let cols = h.len();
    for (i, slot) in out.iter_mut().enumerate() {
        *slot += dot(&u[i * cols..(i + 1) * cols], h);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GruGrads {
    pub(crate) wz: Vec<f64>,
    pub(crate) uz: Vec<f64>,
    pub(crate) bz: Vec<f64>,
    pub(crate) wr: Vec<f64>,
    pub(crate) ur: Vec<f64>,
    pub(crate) br: Vec<f64>,
    pub(crate) wh: Vec<f64>,
    pub(crate) uh: Vec<f64>,
    pub(crate) bh: Vec<f64>,
}

impl GruGrads {
    pub(crate) fn zeros_like(cell: &GruCell) -> Self {
        GruGrads {
            wz: vec![0.0; cell.wz.len()],
            uz: vec![0.0; cell.uz.len()],
            bz: vec![0.0; cell.bz.len()],
            wr: vec![0.0; cell.wr.len()],
            ur: vec![0.0; cell.ur.len()],
            br: vec![0.0; cell.br.len()],
            wh: vec![0.0; cell.wh.len()],
            uh: vec![0.0; cell.uh.len()],
            bh: vec![0.0; cell.bh.len()],
        }
    }

    pub(crate) fn add_assign(&mut self, other: &GruGrads) {
        for (a, b) in [
            (&mut self.wz, &other.wz),
            (&mut self.uz, &other.uz),
            (&mut self.bz, &other.bz),
            (&mut self.wr, &other.wr),
            (&mut self.ur, &other.ur),
            (&mut self.br, &other.br),
            (&mut self.wh, &other.wh),
            (&mut self.uh, &other.uh),
            (&mut self.bh, &other.bh),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub(crate) fn is_finite(&self) -> bool {
        [
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh,
            &self.bh,
        ]
        .iter()
        .all(|b| all_finite(b))
    }
}

/// Reusable temporaries for GRU backward passes.
#[derive(Debug, Clone)]
pub(crate) struct GruBackScratch {
    dah: Vec<f64>,
    daz: Vec<f64>,
    dar: Vec<f64>,
    drh: Vec<f64>,
}

impl GruBackScratch {
    pub(crate) fn new(hidden: usize) -> Self {
        GruBackScratch {
            dah: vec![0.0; hidden],
            daz: vec![0.0; hidden],
            dar: vec![0.0; hidden],
            drh: vec![0.0; hidden],
        }
    }
}
