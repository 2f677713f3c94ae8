use rayon::prelude::*;

use super::forward::{BnCache, Cache, Junction};
use super::{FloatModel, Gradients, Mat, ModelError};

fn mask(x: &mut Mat, cache: &Cache, j: Junction) {
    if let Some(m) = &cache.masks[j.index()] {
        x.apply_mask(m);
    }
}

fn linear_back(x: &Mat, w: &Mat, dy: &Mat, gw: &mut Mat, gb: &mut Mat, need_dx: bool) -> Option<Mat> {
    *gw = x.t_matmul(dy);
    gb.data = dy.col_sums();
    need_dx.then(|| dy.matmul_t(w))
}

fn bn_back(dy: &Mat, gamma: &Mat, c: &BnCache, gg: &mut Mat, gb: &mut Mat) -> Mat {
    let (rows, d) = dy.shape();
    let mut sum_dy = vec![0.0; d];
    let mut sum_dy_xhat = vec![0.0; d];
    for r in 0..rows {
        for j in 0..d {
            sum_dy[j] += dy.at(r, j);
            sum_dy_xhat[j] += dy.at(r, j) * c.xhat.at(r, j);
        }
    }
    gg.data = sum_dy_xhat.clone();
    gb.data = sum_dy.clone();
    let mut dx = Mat::zeros(rows, d);
    let nr = rows as f64;
    for r in 0..rows {
        for j in 0..d {
            let k = gamma.data[j] * c.inv_std[j];
            let v = match c.batch_stats {
                Some(_) => k / nr * (nr * dy.at(r, j) - sum_dy[j] - c.xhat.at(r, j) * sum_dy_xhat[j]),
                None => k * dy.at(r, j),
            };
            dx.set(r, j, v);
        }
    }
    dx
}

/// Parameter gradients of a scalar loss given `dy = dL/dY` for the batch
/// that produced `cache`. Masks recorded by the hook gate the gradient at
/// each junction.
pub fn backward(model: &FloatModel, cache: &Cache, dy: &Mat) -> Result<Gradients, ModelError> {
    if cache.folded {
        return Err(ModelError::Config("cannot backpropagate through folded batch norm".into()));
    }
    let c = model.config;
    let (n, d, batch) = (c.seq_len, c.d_model, cache.batch);
    if dy.shape() != (batch, c.output_dim) {
        return Err(ModelError::Shape { what: "output gradient".into(), expected: (batch, c.output_dim), found: dy.shape() });
    }
    let mut g = model.zero_gradients();
    let w = &cache.weights;
    let (bn1, bn2) = (cache.bn1.as_ref().expect("unfolded"), cache.bn2.as_ref().expect("unfolded"));

    let mut dy = dy.clone();
    mask(&mut dy, cache, Junction::LOutputOut);
    let [.., gw, gb] = &mut g.0[..] else { unreachable!() };
    let mut dgap = linear_back(&cache.gap, &w.l_output, &dy, gw, gb, true).unwrap();
    mask(&mut dgap, cache, Junction::GapOut);

    let mut dz2 = Mat::zeros(batch * n, d);
    for s in 0..batch {
        for i in 0..n {
            for (o, v) in dz2.row_mut(s * n + i).iter_mut().zip(dgap.row(s)) {
                *o = v / n as f64;
            }
        }
    }
    mask(&mut dz2, cache, Junction::BnFfnOut);
    let (head, tail) = g.0.split_at_mut(17);
    let mut dgadd = bn_back(&dz2, &model.bn_ffn.gamma, bn2, &mut head[16], &mut tail[0]);
    mask(&mut dgadd, cache, Junction::AddFfnOut);

    let mut df = dgadd.clone();
    mask(&mut df, cache, Junction::FfnOut);
    let (head, tail) = g.0.split_at_mut(15);
    let mut dh = linear_back(&cache.h, &w.ffn2, &df, &mut head[14], &mut tail[0], true).unwrap();
    dh.apply_mask(&cache.relu);
    mask(&mut dh, cache, Junction::FfnHidden);
    let (head, tail) = g.0.split_at_mut(13);
    let dz1_ffn = linear_back(&cache.z1, &w.ffn1, &dh, &mut head[12], &mut tail[0], true).unwrap();
    let mut dz1 = dgadd;
    dz1.add_assign(&dz1_ffn);
    mask(&mut dz1, cache, Junction::BnMhaOut);

    let (head, tail) = g.0.split_at_mut(11);
    let mut da = bn_back(&dz1, &model.bn_mha.gamma, bn1, &mut head[10], &mut tail[0]);
    mask(&mut da, cache, Junction::AddMhaOut);

    let mut dout = da.clone();
    mask(&mut dout, cache, Junction::MhaOut);
    let (head, tail) = g.0.split_at_mut(9);
    let mut dctx = linear_back(&cache.ctx, &w.wo, &dout, &mut head[8], &mut tail[0], true).unwrap();
    mask(&mut dctx, cache, Junction::MhaContext);

    // attention, one window at a time
    let pf = cache.probs_float.as_ref().unwrap_or(&cache.probs);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut dscores = Mat::zeros(batch * n, n);
    let mut dv = Mat::zeros(batch * n, d);
    dscores.data.par_chunks_mut(n * n).zip(dv.data.par_chunks_mut(n * d)).enumerate().for_each(|(s, (ds, dvb))| {
        let base = s * n;
        for i in 0..n {
            let dci = dctx.row(base + i);
            // dP_ij = dC_i · V_j
            let dp: Vec<f64> = (0..n).map(|j| dci.iter().zip(cache.v.row(base + j)).map(|(a, b)| a * b).sum()).collect();
            let prow = pf.row(base + i);
            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
            for j in 0..n {
                ds[i * n + j] = prow[j] * (dp[j] - dot);
            }
        }
        for j in 0..n {
            let out = &mut dvb[j * d..(j + 1) * d];
            for i in 0..n {
                let pij = cache.probs.at(base + i, j);
                for (o, c) in out.iter_mut().zip(dctx.row(base + i)) {
                    *o += pij * c;
                }
            }
        }
    });
    mask(&mut dscores, cache, Junction::MhaScores);
    dscores.scale(inv_sqrt_d);
    let mut dq = Mat::zeros(batch * n, d);
    let mut dk = Mat::zeros(batch * n, d);
    dq.data.par_chunks_mut(n * d).zip(dk.data.par_chunks_mut(n * d)).enumerate().for_each(|(s, (dqb, dkb))| {
        let base = s * n;
        for i in 0..n {
            for j in 0..n {
                let v = dscores.at(base + i, j);
                for (o, kk) in dqb[i * d..(i + 1) * d].iter_mut().zip(cache.k.row(base + j)) {
                    *o += v * kk;
                }
                for (o, qq) in dkb[j * d..(j + 1) * d].iter_mut().zip(cache.q.row(base + i)) {
                    *o += v * qq;
                }
            }
        }
    });
    mask(&mut dq, cache, Junction::MhaQ);
    mask(&mut dk, cache, Junction::MhaK);
    mask(&mut dv, cache, Junction::MhaV);

    let mut dp = da;
    for (idx, (dproj, wm)) in [(2usize, (&dq, &w.wq)), (4, (&dk, &w.wk)), (6, (&dv, &w.wv))] {
        let (head, tail) = g.0.split_at_mut(idx + 1);
        let dx = linear_back(&cache.p, wm, dproj, &mut head[idx], &mut tail[0], true).unwrap();
        dp.add_assign(&dx);
    }
    mask(&mut dp, cache, Junction::AddPeOut);
    let mut de = dp;
    mask(&mut de, cache, Junction::LInputOut);
    let (head, tail) = g.0.split_at_mut(1);
    linear_back(&cache.x0, &model.l_input.weight, &de, &mut head[0], &mut tail[0], false);
    Ok(g)
}

/// Mean squared error over all outputs and its gradient.
pub fn mse_loss(y: &Mat, target: &[f64]) -> (f64, Mat) {
    assert_eq!(y.len(), target.len());
    let k = y.len() as f64;
    let mut grad = y.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data.iter_mut().zip(target) {
        let e = *g - t;
        loss += e * e;
        *g = 2.0 * e / k;
    }
    (loss / k, grad)
}
