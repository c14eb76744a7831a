//! Linear-regression oracle probe: ridge from mean stub features to labels,
//! across corpus template scales. Exploratory tool, not part of the build.

use impress_core::corpus::{build_corpus, CorpusParams};
use impress_core::frontend::{Frontend, StandaloneFrontend};
use impress_core::impression::ImpressionDim;

fn ridge_fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len() + 1; // bias column
    let k = y[0].len();
    // Normal equations A = XtX + lambda I, B = XtY
    let mut a = vec![vec![0.0f64; d]; d];
    let mut b = vec![vec![0.0f64; k]; d];
    for i in 0..n {
        let mut xi = x[i].clone();
        xi.push(1.0);
        for p in 0..d {
            for q in 0..d {
                a[p][q] += xi[p] * xi[q];
            }
            for t in 0..k {
                b[p][t] += xi[p] * y[i][t];
            }
        }
    }
    for p in 0..d - 1 {
        a[p][p] += lambda;
    }
    // Gaussian elimination
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let diag = a[col][col];
        for r in col + 1..d {
            let f = a[r][col] / diag;
            for c in col..d {
                a[r][c] -= f * a[col][c];
            }
            for t in 0..k {
                b[r][t] -= f * b[col][t];
            }
        }
    }
    let mut w = vec![vec![0.0f64; k]; d];
    for r in (0..d).rev() {
        for t in 0..k {
            let mut s = b[r][t];
            for c in r + 1..d {
                s -= a[r][c] * w[c][t];
            }
            w[r][t] = s / a[r][r];
        }
    }
    w
}

fn predict(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = w.len();
    let k = w[0].len();
    (0..k)
        .map(|t| {
            let mut s = w[d - 1][t];
            for p in 0..d - 1 {
                s += w[p][t] * x[p];
            }
            s
        })
        .collect()
}

fn main() {
    let frontend = StandaloneFrontend::new(0, 4, 96);
    for sigma_t in [1.0f64, 0.6, 0.4, 0.25] {
        std::env::set_var("IMPRESS_TEMPLATE_SIGMA", sigma_t.to_string());
        let dir = std::env::temp_dir().join(format!("impress-ridge-{sigma_t}"));
        std::fs::remove_dir_all(&dir).ok();
        let manifest = build_corpus(&CorpusParams::default(), &dir).unwrap();

        let feats = |recs: &[&impress_core::corpus::ManifestRecord]| {
            recs.iter()
                .map(|rec| {
                    let mel = manifest.load_mel(rec).unwrap();
                    let stack = frontend.extract(&mel);
                    let t = stack.frames();
                    let mut f = Vec::new();
                    for l in 0..stack.n_layers() {
                        let ld = stack.layer(l).data();
                        for c in 0..96 {
                            let mut s = 0.0f64;
                            for fr in 0..t {
                                s += ld[fr * 96 + c] as f64;
                            }
                            f.push(s / t as f64);
                        }
                    }
                    f
                })
                .collect::<Vec<_>>()
        };
        let labels = |recs: &[&impress_core::corpus::ManifestRecord]| {
            recs.iter()
                .map(|r| {
                    ImpressionDim::LIKERT
                        .iter()
                        .map(|d| r.label_vector().get(*d))
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        };

        let train = manifest.split("train");
        let eval = manifest.split("eval");
        let xt = feats(&train);
        let yt = labels(&train);
        let w = ridge_fit(&xt, &yt, 1e-3);
        let xe = feats(&eval);
        let ye = labels(&eval);
        let mut se = 0.0;
        let mut n = 0;
        for (x, y) in xe.iter().zip(&ye) {
            let p = predict(&w, x);
            for (a, b) in p.iter().zip(y) {
                se += (a - b) * (a - b);
                n += 1;
            }
        }
        println!("template sigma {sigma_t}: ridge holdout RMSE (A-J) = {:.4}", (se / n as f64).sqrt());
        std::fs::remove_dir_all(&dir).ok();
    }
}
