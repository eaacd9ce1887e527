use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Var;

/// "Same"-padded 1-D convolution over each packed sequence.
///
/// `kernel` is `[k, d_in, d_out]` with odd `k`; rows outside a sequence
/// read as zeros.
pub fn conv1d<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    segments: &[Range<usize>],
) -> Result<Var<'t>> {
    let ks = kernel.shape();
    let xs = x.shape();
    if ks.len() != 3 || xs.len() != 2 || ks[1] != xs[1] {
        return Err(Error::shape("conv1d", &xs, &ks));
    }
    let (k, d_in, d_out) = (ks[0], ks[1], ks[2]);
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv1d kernel width {k} must be odd"
        )));
    }
    let half = (k / 2) as isize;
    let mut taps = Vec::with_capacity(k);
    for off in -half..=half {
        let mut index = vec![None; xs[0]];
        for seg in segments {
            for r in seg.clone() {
                let src = r as isize + off;
                if src >= seg.start as isize && src < seg.end as isize {
                    index[r] = Some(src as usize);
                }
            }
        }
        taps.push(x.gather_rows(&index)?);
    }
    let cols = if k == 1 {
        taps[0]
    } else {
        Var::concat_cols(&taps)?
    };
    let y = cols.matmul(kernel.reshape(&[k * d_in, d_out])?)?;
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// Weights of one LSTM direction. Gates are packed as `[i, f, g, o]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars<'t> {
    /// `[d_in, 4h]`
    pub w_ih: Var<'t>,
    /// `[h, 4h]`
    pub w_hh: Var<'t>,
    /// `[4h]`
    pub b: Var<'t>,
}

/// Single-direction LSTM over packed sequences, zero initial state.
///
/// Returns `[T, h]` hidden states aligned with the input rows. With
/// `reverse` each sequence is read from its last row to its first.
pub fn lstm<'t>(
    x: Var<'t>,
    w: &LstmVars<'t>,
    segments: &[Range<usize>],
    reverse: bool,
) -> Result<Var<'t>> {
    let xs = x.shape();
    let hs = w.w_hh.shape();
    if hs.len() != 2 || hs[1] != 4 * hs[0] {
        return Err(Error::shape("lstm recurrent weights", &hs, &[]));
    }
    let h = hs[0];
    let is = w.w_ih.shape();
    if xs.len() != 2 || is != [xs[1], 4 * h] || w.b.shape() != [4 * h] {
        return Err(Error::shape("lstm input weights", &xs, &is));
    }
    let rows = xs[0];
    let proj = x.matmul(w.w_ih)?.add(w.b)?;
    let longest = segments.iter().map(|s| s.len()).max().unwrap_or(0);

    let mut state: Option<(Var<'t>, Var<'t>)> = None;
    let mut prev_active: Vec<usize> = Vec::new();
    let mut outputs = Vec::with_capacity(longest);
    let mut position = vec![None; rows];
    let mut emitted = 0;
    for t in 0..longest {
        let active: Vec<usize> = (0..segments.len())
            .filter(|&s| segments[s].len() > t)
            .collect();
        let index: Vec<Option<usize>> = active
            .iter()
            .map(|&s| {
                let seg = &segments[s];
                Some(if reverse {
                    seg.end - 1 - t
                } else {
                    seg.start + t
                })
            })
            .collect();
        for (i, r) in index.iter().enumerate() {
            position[r.expect("always set")] = Some(emitted + i);
        }
        emitted += active.len();

        let mut gates = proj.gather_rows(&index)?;
        let mut c_prev = None;
        if let Some((h_prev, c)) = state {
            // sequences only ever drop out, so `active` is a subsequence
            let (h_prev, c) = if active.len() == prev_active.len() {
                (h_prev, c)
            } else {
                let keep: Vec<Option<usize>> = active
                    .iter()
                    .map(|s| prev_active.binary_search(s).ok())
                    .collect();
                (h_prev.gather_rows(&keep)?, c.gather_rows(&keep)?)
            };
            gates = gates.add(h_prev.matmul(w.w_hh)?)?;
            c_prev = Some(c);
        }
        let i = gates.slice_cols(0, h)?.sigmoid()?;
        let f = gates.slice_cols(h, h)?.sigmoid()?;
        let g = gates.slice_cols(2 * h, h)?.tanh()?;
        let o = gates.slice_cols(3 * h, h)?.sigmoid()?;
        let mut c = i.mul(g)?;
        if let Some(c_prev) = c_prev {
            c = c.add(f.mul(c_prev)?)?;
        }
        let h_t = o.mul(c.tanh()?)?;
        outputs.push(h_t);
        state = Some((h_t, c));
        prev_active = active;
    }
    if outputs.is_empty() {
        return Ok(x.tape().zeros(&[rows, h]));
    }
    let all = Var::concat_rows(&outputs)?;
    all.gather_rows(&position)
}

/// Forward and backward LSTM states concatenated per row: `[T, 2h]`.
pub fn bilstm<'t>(
    x: Var<'t>,
    forward: &LstmVars<'t>,
    backward: &LstmVars<'t>,
    segments: &[Range<usize>],
) -> Result<Var<'t>> {
    let f = lstm(x, forward, segments, false)?;
    let b = lstm(x, backward, segments, true)?;
    Var::concat_cols(&[f, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_many, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(&random(&[5, 3], &mut rng));
        let k = tape.constant(&Tensor::eye(3).reshape(&[1, 3, 3]).unwrap());
        let y = conv1d(x, k, None, &[0..5]).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn ones_kernel_with_zero_padding() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[3, 1], 1.0));
        let k = tape.constant(&Tensor::full(&[3, 1, 1], 1.0));
        let y = conv1d(x, k, None, &[0..3]).unwrap();
        assert_eq!(y.value(), vec![2.0, 3.0, 2.0]);
    }

    #[test]
    fn even_kernel_rejected_and_shapes_kept() {
        let tape = Tape::new();
        let x = tape.zeros(&[4, 2]);
        assert!(matches!(
            conv1d(x, tape.zeros(&[2, 2, 5]), None, &[0..4]),
            Err(Error::Config(_))
        ));
        let y = conv1d(x, tape.zeros(&[3, 2, 5]), None, &[0..4]).unwrap();
        assert_eq!(y.shape(), vec![4, 5]);
    }

    fn weights<'t>(tape: &'t Tape, vals: &[Tensor; 3]) -> LstmVars<'t> {
        LstmVars {
            w_ih: tape.constant(&vals[0]),
            w_hh: tape.constant(&vals[1]),
            b: tape.constant(&vals[2]),
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(&random(&[4, 3], &mut rng));
        let w = [
            Tensor::zeros(&[3, 8]),
            Tensor::zeros(&[2, 8]),
            Tensor::zeros(&[8]),
        ];
        let lw = weights(&tape, &w);
        let y = bilstm(x, &lw, &lw, &[0..4]).unwrap();
        assert_eq!(y.shape(), vec![4, 4]);
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_halves_agree() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(&random(&[1, 3], &mut rng));
        let w = [
            random(&[3, 8], &mut rng),
            random(&[2, 8], &mut rng),
            random(&[8], &mut rng),
        ];
        let lw = weights(&tape, &w);
        let y = bilstm(x, &lw, &lw, &[0..1]).unwrap().value();
        assert_eq!(y[..2], y[2..]);
    }

    #[test]
    fn two_steps_match_manual_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, h) = (2, 2);
        let xs = random(&[2, d], &mut rng);
        let w = [
            random(&[d, 4 * h], &mut rng),
            random(&[h, 4 * h], &mut rng),
            random(&[4 * h], &mut rng),
        ];
        let tape = Tape::new();
        let got = lstm(tape.constant(&xs), &weights(&tape, &w), &[0..2], false)
            .unwrap()
            .value();

        let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
        let mut expect = Vec::new();
        for t in 0..2 {
            let z: Vec<f64> = (0..4 * h)
                .map(|j| {
                    w[2].values()[j]
                        + (0..d).map(|i| xs.at2(t, i) * w[0].at2(i, j)).sum::<f64>()
                        + (0..h).map(|i| hp[i] * w[1].at2(i, j)).sum::<f64>()
                })
                .collect();
            let mut hn = vec![0.0; h];
            let mut cn = vec![0.0; h];
            for u in 0..h {
                let (ig, fg, gg, og) = (
                    sigmoid(z[u]),
                    sigmoid(z[h + u]),
                    z[2 * h + u].tanh(),
                    sigmoid(z[3 * h + u]),
                );
                cn[u] = fg * cp[u] + ig * gg;
                hn[u] = og * cn[u].tanh();
            }
            expect.extend_from_slice(&hn);
            hp = hn;
            cp = cn;
        }
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn packed_batch_matches_individual_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[6, 3], &mut rng);
        let fw = [
            random(&[3, 8], &mut rng),
            random(&[2, 8], &mut rng),
            random(&[8], &mut rng),
        ];
        let bw = [
            random(&[3, 8], &mut rng),
            random(&[2, 8], &mut rng),
            random(&[8], &mut rng),
        ];
        let run = |rows: Range<usize>| {
            let tape = Tape::new();
            let sub = Tensor::new(
                vec![rows.len(), 3],
                x.values()[rows.start * 3..rows.end * 3].to_vec(),
            )
            .unwrap();
            bilstm(
                tape.constant(&sub),
                &weights(&tape, &fw),
                &weights(&tape, &bw),
                &[0..rows.len()],
            )
            .unwrap()
            .value()
        };
        let tape = Tape::new();
        let joint = bilstm(
            tape.constant(&x),
            &weights(&tape, &fw),
            &weights(&tape, &bw),
            &[0..2, 2..6],
        )
        .unwrap()
        .value();
        let mut separate = run(0..2);
        separate.extend(run(2..6));
        for (a, b) in joint.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![
            random(&[5, 3], &mut rng),
            random(&[3, 8], &mut rng),
            random(&[2, 8], &mut rng),
            random(&[8], &mut rng),
            random(&[3, 3, 3], &mut rng),
        ];
        let segs = [0..3, 3..5];
        let report = finite_diff_check_many(
            |_, v| {
                let c = conv1d(v[0], v[4], None, &segs)?;
                let w = LstmVars {
                    w_ih: v[1],
                    w_hh: v[2],
                    b: v[3],
                };
                let y = bilstm(c, &w, &w, &segs)?;
                y.mul(y)?.sum()
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{}", report.max_rel_error());
    }
}
