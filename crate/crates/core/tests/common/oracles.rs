//! Straight-loop reference implementations, written without the tensor
//! engine so they share no code with the library.

use rumor_adapt::encoder::{AttentionParams, EncoderParams};
use rumor_adapt::Tensor;

pub type M = Vec<Vec<f64>>;

pub fn to_m(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i)).collect()
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn head_oracle(xq: &M, xkv: &M, wq: &M, wk: &M, wv: &M) -> M {
    let q = mm(xq, wq);
    let k = mm(xkv, wk);
    let v = mm(xkv, wv);
    let dk = wq[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let w = softmax(&logits);
            let mut out = vec![0.0; v[0].len()];
            for (wj, vj) in w.iter().zip(&v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += wj * x;
                }
            }
            out
        })
        .collect()
}

pub fn mha_oracle(xq: &M, xkv: &M, attn: &AttentionParams) -> M {
    let heads: Vec<M> = (0..attn.w_q.len())
        .map(|j| head_oracle(xq, xkv, &to_m(&attn.w_q[j]), &to_m(&attn.w_k[j]), &to_m(&attn.w_v[j])))
        .collect();
    let concat: M = (0..xq.len()).map(|i| heads.iter().flat_map(|h| h[i].clone()).collect()).collect();
    mm(&concat, &to_m(&attn.w_o))
}

pub fn encode_oracle(xq: &M, xkv: &M, attn: &AttentionParams, p: &EncoderParams) -> Vec<f64> {
    let o = mha_oracle(xq, xkv, attn);
    let (w1, b1, w2, b2) = (to_m(&p.ffn.w1), p.ffn.b1.to_vec(), to_m(&p.ffn.w2), p.ffn.b2.to_vec());
    let d = o[0].len();
    let mut pooled = vec![f64::NEG_INFINITY; d];
    for row in &o {
        let mut hidden = b1.clone();
        for (j, h) in hidden.iter_mut().enumerate() {
            for (l, x) in row.iter().enumerate() {
                *h += x * w1[l][j];
            }
            *h = h.max(0.0);
        }
        for c in 0..d {
            let mut y = b2[c];
            for (j, h) in hidden.iter().enumerate() {
                y += h * w2[j][c];
            }
            pooled[c] = pooled[c].max(y);
        }
    }
    pooled
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn supcon_oracle(f: &M, y: &[usize], tau: f64, include_self: bool) -> f64 {
    let b = f.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for k in 0..b {
            if k != i || include_self {
                denom += (cos(&f[i], &f[k]) / tau).exp();
            }
        }
        for j in 0..b {
            if (j != i || include_self) && y[j] == y[i] {
                total += ((cos(&f[i], &f[j]) / tau).exp() / denom).ln();
            }
        }
    }
    -total / b as f64
}

pub fn cross_oracle(a: &M, ya: &[usize], c: &M, yc: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        let denom: f64 = c.iter().map(|ck| (cos(&a[i], ck) / tau).exp()).sum();
        for j in 0..c.len() {
            if ya[i] == yc[j] {
                total += ((cos(&a[i], &c[j]) / tau).exp() / denom).ln();
            }
        }
    }
    -total / a.len() as f64
}

pub fn centers_oracle(f: &M, y: &[usize], nc: usize) -> Vec<Option<Vec<f64>>> {
    (0..nc)
        .map(|m| {
            let members: Vec<&Vec<f64>> = f.iter().zip(y).filter(|(_, &l)| l == m).map(|(r, _)| r).collect();
            if members.is_empty() {
                return None;
            }
            let mut c = vec![0.0; f[0].len()];
            for r in &members {
                for (a, b) in c.iter_mut().zip(r.iter()) {
                    *a += b;
                }
            }
            Some(c.iter().map(|v| v / members.len() as f64).collect())
        })
        .collect()
}

pub fn proto_oracle(t: &M, yt: &[usize], centers: &[Option<Vec<f64>>], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut used = 0;
    for (i, row) in t.iter().enumerate() {
        let Some(own) = &centers[yt[i]] else { continue };
        used += 1;
        let denom: f64 = centers.iter().flatten().map(|c| (cos(row, c) / tau).exp()).sum();
        total += ((cos(row, own) / tau).exp() / denom).ln();
    }
    if used == 0 {
        0.0
    } else {
        -total / used as f64
    }
}

pub fn kl_oracle(pc: &M, p: &M) -> f64 {
    let mut s = 0.0;
    for (a, b) in pc.iter().zip(p) {
        for (x, y) in a.iter().zip(b) {
            s += x * (x.max(1e-12).ln() - y.max(1e-12).ln());
        }
    }
    s
}

pub fn ce_oracle(p: &M, y: &[usize]) -> f64 {
    -p.iter().zip(y).map(|(row, &t)| row[t].max(1e-12).ln()).sum::<f64>() / p.len() as f64
}
