//! Atrous spatial pyramid pooling with an epoch-dependent dilation schedule,
//! and its injection into last-block attention maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::ConvGeometry;
use crate::params::{join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::AttentionMap;

pub type Rates = [usize; 4];

/// Rates used for each residue of `epoch % 10`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Rates>", into = "Vec<Rates>")]
pub struct DilationSchedule {
    table: [Rates; 10],
}

const SMALL: Rates = [1, 1, 2, 3];
const MEDIUM: Rates = [1, 1, 3, 5];
const LARGE: Rates = [1, 3, 6, 9];
const DEEPLAB: Rates = [1, 6, 12, 18];

impl Default for DilationSchedule {
    fn default() -> Self {
        Self {
            table: [
                DEEPLAB, SMALL, MEDIUM, SMALL, MEDIUM, SMALL, MEDIUM, SMALL, LARGE, LARGE,
            ],
        }
    }
}

impl DilationSchedule {
    /// Custom table indexed by `epoch % 10`.
    pub fn from_table(table: [Rates; 10]) -> Result<Self> {
        if table.iter().flatten().any(|&r| r == 0) {
            return Err(Error::InvalidArgument("dilation rates must be at least 1".into()));
        }
        Ok(Self { table })
    }

    pub fn rates(&self, epoch: u64) -> Rates {
        self.table[(epoch % 10) as usize]
    }

    pub fn table(&self) -> &[Rates; 10] {
        &self.table
    }
}

impl TryFrom<Vec<Rates>> for DilationSchedule {
    type Error = Error;

    fn try_from(rows: Vec<Rates>) -> Result<Self> {
        let table: [Rates; 10] = rows
            .try_into()
            .map_err(|r: Vec<Rates>| Error::InvalidArgument(format!("schedule needs 10 rows, got {}", r.len())))?;
        Self::from_table(table)
    }
}

impl From<DilationSchedule> for Vec<Rates> {
    fn from(s: DilationSchedule) -> Self {
        s.table.to_vec()
    }
}

/// Rates for a (1-based) epoch under the default table.
pub fn dilation_schedule(epoch: u64) -> Rates {
    DilationSchedule::default().rates(epoch)
}

/// One depthwise-separable branch: `depthwise: [C, k, k]`, `pointwise: [C, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<T> {
    pub depthwise: T,
    pub pointwise: T,
}

/// Branch 0 is 1x1; branches 1..3 are 3x3 dilated. The image-pooling
/// branch is a 1x1 conv (`pool: [C, C]`) on the spatial mean, and the five
/// outputs are fused by `fusion: [C, 5C]` plus `fusion_bias: [C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AsppParams<T> {
    pub branches: Vec<BranchParams<T>>,
    pub pool: T,
    pub fusion: T,
    pub fusion_bias: T,
}

pub const NUM_BRANCHES: usize = 4;

fn branch_kernel(branch: usize) -> usize {
    if branch == 0 {
        1
    } else {
        3
    }
}

impl AsppParams<Tensor> {
    /// Pass-through branches, zero pooling branch and a fusion that averages
    /// the four conv branches: the block computes the identity.
    pub fn identity(channels: usize) -> Self {
        let c = channels;
        let branches = (0..NUM_BRANCHES)
            .map(|b| {
                let k = branch_kernel(b);
                let mut dw = Tensor::zeros(&[c, k, k]);
                for ch in 0..c {
                    dw.set(&[ch, k / 2, k / 2], 1.0);
                }
                BranchParams {
                    depthwise: dw,
                    pointwise: Tensor::eye(c),
                }
            })
            .collect();
        let mut fusion = Tensor::zeros(&[c, 5 * c]);
        for ch in 0..c {
            for b in 0..NUM_BRANCHES {
                fusion.set(&[ch, b * c + ch], 1.0 / NUM_BRANCHES as f64);
            }
        }
        Self {
            branches,
            pool: Tensor::zeros(&[c, c]),
            fusion,
            fusion_bias: Tensor::zeros(&[c]),
        }
    }

    /// Identity configuration perturbed by Gaussian noise of std `noise`.
    pub fn init<R: Rng + ?Sized>(channels: usize, noise: f64, rng: &mut R) -> Self {
        let mut p = Self::identity(channels);
        p.visit_mut(&mut |t| {
            let n = Tensor::normal(t.shape(), noise, rng);
            for (a, b) in t.data_mut().iter_mut().zip(n.data()) {
                *a += b;
            }
        });
        p
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut p = Self::identity(channels);
        p.visit_mut(&mut |t| *t = Tensor::uniform(t.shape(), -1.0, 1.0, rng));
        p
    }

    pub fn channels(&self) -> usize {
        self.fusion.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let bad = |what: String| Err(shape_err("aspp_params", what));
        if self.branches.len() != NUM_BRANCHES {
            return bad(format!("expected {NUM_BRANCHES} branches, got {}", self.branches.len()));
        }
        for (b, br) in self.branches.iter().enumerate() {
            let k = branch_kernel(b);
            if br.depthwise.shape() != [c, k, k] || br.pointwise.shape() != [c, c] {
                return bad(format!(
                    "branch {b}: depthwise {:?}, pointwise {:?}, expected [{c}, {k}, {k}] and [{c}, {c}]",
                    br.depthwise.shape(),
                    br.pointwise.shape()
                ));
            }
        }
        if self.pool.shape() != [c, c]
            || self.fusion.shape() != [c, 5 * c]
            || self.fusion_bias.shape() != [c]
        {
            return bad(format!(
                "pool {:?}, fusion {:?}, bias {:?} for {c} channels",
                self.pool.shape(),
                self.fusion.shape(),
                self.fusion_bias.shape()
            ));
        }
        Ok(())
    }
}

impl<T> ParamTree<T> for AsppParams<T> {
    type Mapped<U> = AsppParams<U>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<AsppParams<U>> {
        let mut branches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            branches.push(BranchParams {
                depthwise: f(&b.depthwise)?,
                pointwise: f(&b.pointwise)?,
            });
        }
        Ok(AsppParams {
            branches,
            pool: f(&self.pool)?,
            fusion: f(&self.fusion)?,
            fusion_bias: f(&self.fusion_bias)?,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for b in &mut self.branches {
            f(&mut b.depthwise);
            f(&mut b.pointwise);
        }
        f(&mut self.pool);
        f(&mut self.fusion);
        f(&mut self.fusion_bias);
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, b) in self.branches.iter().enumerate() {
            out.push((join(prefix, &format!("branch{i}.depthwise")), &b.depthwise));
            out.push((join(prefix, &format!("branch{i}.pointwise")), &b.pointwise));
        }
        out.push((join(prefix, "pool"), &self.pool));
        out.push((join(prefix, "fusion"), &self.fusion));
        out.push((join(prefix, "fusion_bias"), &self.fusion_bias));
    }
}

/// Geometry of branch `b` at `rate` on an `m x m` input: 1x1 for branch 0,
/// otherwise 3x3 with padding equal to the rate so the extent is preserved.
pub fn branch_geometry(branch: usize, rate: usize, m: usize) -> ConvGeometry {
    let k = branch_kernel(branch);
    ConvGeometry {
        input_size: m,
        padding: if k == 1 { 0 } else { rate },
        kernel_size: k,
        dilation: rate,
        stride: 1,
    }
}

/// Output of a single conv branch (before fusion).
pub fn aspp_branch(
    tape: &mut Tape,
    feature: Var,
    branch: usize,
    rate: usize,
    params: &AsppParams<Var>,
) -> Result<Var> {
    let m = tape.value(feature).shape()[1];
    let g = branch_geometry(branch, rate, m);
    let out = g.output_size()?;
    if out != m {
        return Err(Error::InvalidGeometry(format!(
            "branch {branch} at rate {rate} maps {m} to {out}"
        )));
    }
    let b = &params.branches[branch];
    tape.depthwise_separable_conv(feature, b.depthwise, b.pointwise, &g)
}

pub fn aspp_forward_tape(
    tape: &mut Tape,
    feature: Var,
    rates: &Rates,
    params: &AsppParams<Var>,
) -> Result<Var> {
    let shape = tape.value(feature).shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(shape_err("aspp_forward", format!("expected square [C, H, W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let fusion_shape = tape.value(params.fusion).shape().to_vec();
    if fusion_shape != [c, 5 * c] {
        return Err(shape_err(
            "aspp_forward",
            format!("fusion kernel {fusion_shape:?} for {c} input channels"),
        ));
    }
    let mut outputs = Vec::with_capacity(NUM_BRANCHES + 1);
    for (b, &rate) in rates.iter().enumerate() {
        outputs.push(aspp_branch(tape, feature, b, rate, params)?);
    }

    let flat = tape.reshape(feature, &[c, h * w])?;
    let avg = tape.constant(Tensor::full(&[h * w, 1], 1.0 / (h * w) as f64))?;
    let pooled = tape.matmul(flat, avg)?;
    let pooled = tape.matmul(params.pool, pooled)?;
    let pooled = tape.broadcast(pooled, &[c, h * w])?;
    outputs.push(tape.reshape(pooled, &[c, h, w])?);

    let stacked = tape.concat(&outputs, 0)?;
    let stacked = tape.reshape(stacked, &[5 * c, h * w])?;
    let fused = tape.matmul(params.fusion, stacked)?;
    let bias = tape.reshape(params.fusion_bias, &[c, 1])?;
    let bias = tape.broadcast(bias, &[c, h * w])?;
    let fused = tape.add(fused, bias)?;
    tape.reshape(fused, &[c, h, w])
}

/// Applies the ASPP block to a `[C, H, W]` feature map.
pub fn aspp_forward(feature: &Tensor, rates: &Rates, params: &AsppParams<Tensor>) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let bound = crate::params::bind(&mut tape, params, false)?;
    let x = tape.constant(feature.clone())?;
    let y = aspp_forward_tape(&mut tape, x, rates, &bound)?;
    Ok(tape.value(y).clone())
}

pub(crate) fn grid_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::NotSquare {
            what: "spatial token count",
            count: n,
        });
    }
    Ok(side)
}

/// Refines one head's `[N+1, N+1]` attention weights (class token first).
///
/// Each query row's N spatial weights become one channel of a `sqrt(N) x
/// sqrt(N)` grid; the stacked grids go through ASPP, then relu and a row
/// softmax. The refined row is scaled to the row's original spatial mass so
/// rows still sum to one with the class-token column untouched. With
/// `residual`, the result is averaged with the original spatial weights.
pub fn inject_head(
    tape: &mut Tape,
    weights: Var,
    rates: &Rates,
    params: &AsppParams<Var>,
    residual: bool,
) -> Result<Var> {
    let t = tape.value(weights).shape()[0];
    let n = t - 1;
    let side = grid_side(n)?;
    let rows = tape.narrow(weights, 0, 1, n)?;
    let spatial = tape.narrow(rows, 1, 1, n)?;
    let cls_col = tape.narrow(rows, 1, 0, 1)?;

    let grid = tape.reshape(spatial, &[n, side, side])?;
    let refined = aspp_forward_tape(tape, grid, rates, params)?;
    let refined = tape.reshape(refined, &[n, n])?;
    let refined = tape.relu(refined)?;
    let refined = tape.softmax(refined, 1)?;

    let neg = tape.scale(cls_col, -1.0)?;
    let mass = tape.add_scalar(neg, 1.0)?;
    let mass = tape.broadcast(mass, &[n, n])?;
    let mut new_spatial = tape.mul(refined, mass)?;
    if residual {
        let sum = tape.add(new_spatial, spatial)?;
        new_spatial = tape.scale(sum, 0.5)?;
    }
    let body = tape.concat(&[cls_col, new_spatial], 1)?;
    let head_row = tape.narrow(weights, 0, 0, 1)?;
    tape.concat(&[head_row, body], 0)
}

/// Plain-tensor injection over every head of `attn`, with the schedule's
/// rates for `epoch`.
pub fn attention_aspp_inject(
    attn: &AttentionMap,
    epoch: u64,
    schedule: &DilationSchedule,
    params: &AsppParams<Tensor>,
) -> Result<AttentionMap> {
    params.validate()?;
    let rates = schedule.rates(epoch);
    let shape = attn.weights.shape().to_vec();
    let (heads, t) = (shape[0], shape[1]);
    let mut tape = Tape::new();
    let bound = crate::params::bind(&mut tape, params, false)?;
    let all = tape.constant(attn.weights.clone())?;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let w = tape.narrow(all, 0, h, 1)?;
        let w = tape.reshape(w, &[t, t])?;
        let r = inject_head(&mut tape, w, &rates, &bound, false)?;
        out.push(tape.reshape(r, &[1, t, t])?);
    }
    let stacked = tape.concat(&out, 0)?;
    AttentionMap::new(tape.value(stacked).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_rows() {
        assert_eq!(dilation_schedule(13), [1, 1, 2, 3]);
        assert_eq!(dilation_schedule(20), [1, 6, 12, 18]);
        assert_eq!(dilation_schedule(8), [1, 3, 6, 9]);
        for e in [1, 3, 5, 7] {
            assert_eq!(dilation_schedule(e), [1, 1, 2, 3]);
        }
        for e in [2, 4, 6] {
            assert_eq!(dilation_schedule(e), [1, 1, 3, 5]);
        }
        assert_eq!(dilation_schedule(9), [1, 3, 6, 9]);
        assert_eq!(dilation_schedule(10), [1, 6, 12, 18]);
    }

    #[test]
    fn periodic() {
        for e in 1..=90 {
            assert_eq!(dilation_schedule(e), dilation_schedule(e + 10));
        }
    }

    #[test]
    fn schedule_serde_round_trip() {
        let s = DilationSchedule::default();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DilationSchedule>(&json).unwrap(), s);
        assert!(serde_json::from_str::<DilationSchedule>("[[1,1,1,1]]").is_err());
    }

    #[test]
    fn constant_output_from_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = AsppParams::random(3, &mut rng);
        p.visit_mut(&mut |t| *t = Tensor::zeros(t.shape()));
        p.fusion_bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let y = aspp_forward(&x, &[1, 1, 2, 3], &p).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8]);
        for c in 0..3 {
            for i in 0..64 {
                assert_eq!(y.data()[c * 64 + i], p.fusion_bias.data()[c]);
            }
        }
    }

    #[test]
    fn identity_params_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
        for rates in DilationSchedule::default().table() {
            let y = aspp_forward(&x, rates, &AsppParams::identity(4)).unwrap();
            assert!(y.max_abs_diff(&x).unwrap() < 1e-14);
        }
    }

    #[test]
    fn preserves_shape_for_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AsppParams::random(2, &mut rng);
        for m in [2, 5, 8, 16] {
            let x = Tensor::uniform(&[2, m, m], -1.0, 1.0, &mut rng);
            for rates in DilationSchedule::default().table() {
                let y = aspp_forward(&x, rates, &p).unwrap();
                assert_eq!(y.shape(), &[2, m, m]);
            }
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AsppParams::random(2, &mut rng);
        assert!(aspp_forward(&Tensor::zeros(&[3, 4, 4]), &[1, 1, 2, 3], &p).is_err());
        assert!(aspp_forward(&Tensor::zeros(&[2, 4, 5]), &[1, 1, 2, 3], &p).is_err());
        assert!(aspp_forward(&Tensor::zeros(&[2, 4, 4]), &[1, 0, 2, 3], &p).is_err());
    }

    #[test]
    fn branch_equals_expanded_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 3;
        let p = AsppParams::random(c, &mut rng);
        let x = Tensor::uniform(&[c, 8, 8], -1.0, 1.0, &mut rng);
        for (b, rate) in [(0, 1), (1, 1), (1, 2), (2, 6), (3, 18)] {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &p, false).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let y = aspp_branch(&mut tape, xv, b, rate, &bound).unwrap();
            let dw = &p.branches[b].depthwise;
            let pw = &p.branches[b].pointwise;
            let k = dw.shape()[1];
            let expanded = Tensor::from_fn(&[c, c, k, k], |i| {
                let (o, ci, uv) = (i / (c * k * k), (i / (k * k)) % c, i % (k * k));
                pw.get(&[o, ci]) * dw.data()[ci * k * k + uv]
            });
            let g = branch_geometry(b, rate, 8);
            let reference = crate::kernels::conv2d(&x, &expanded, &g).unwrap();
            assert!(tape.value(y).max_abs_diff(&reference).unwrap() < 1e-12);
        }
    }

    fn random_attention(heads: usize, t: usize, rng: &mut ChaCha8Rng) -> AttentionMap {
        let logits = Tensor::uniform(&[heads, t, t], -3.0, 3.0, rng);
        AttentionMap::new(crate::kernels::softmax(&logits, 2).unwrap()).unwrap()
    }

    #[test]
    fn injection_keeps_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = random_attention(2, 17, &mut rng);
        let schedule = DilationSchedule::default();
        for epoch in [1, 2, 8, 10] {
            let p = AsppParams::random(16, &mut rng);
            let out = attention_aspp_inject(&attn, epoch, &schedule, &p).unwrap();
            assert!(out.max_row_error() < 1e-6);
            assert!(out.weights.data().iter().all(|&v| v >= 0.0));
            let id = attention_aspp_inject(&attn, epoch, &schedule, &AsppParams::identity(16)).unwrap();
            assert!(id.max_row_error() < 1e-6);
        }
    }

    #[test]
    fn injection_leaves_class_token_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let attn = random_attention(1, 10, &mut rng);
        let p = AsppParams::random(9, &mut rng);
        let out = attention_aspp_inject(&attn, 3, &DilationSchedule::default(), &p).unwrap();
        for j in 0..10 {
            assert_eq!(out.weights.get(&[0, 0, j]), attn.weights.get(&[0, 0, j]));
            assert_eq!(out.weights.get(&[0, j, 0]), attn.weights.get(&[0, j, 0]));
        }
    }

    #[test]
    fn injection_requires_square_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attn = random_attention(1, 6, &mut rng);
        let p = AsppParams::random(5, &mut rng);
        assert!(matches!(
            attention_aspp_inject(&attn, 1, &DilationSchedule::default(), &p),
            Err(Error::NotSquare { .. })
        ));
    }
}
