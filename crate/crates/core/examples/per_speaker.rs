//! Per-speaker estimator error breakdown. Exploratory tool.

use impress_core::corpus::load_manifest;
use impress_core::estimator::EstimatorModel;
use impress_core::impression::ImpressionDim;

fn main() {
    let manifest = load_manifest(std::path::Path::new("/tmp/impress-full/corpus")).unwrap();
    let model = EstimatorModel::load(std::path::Path::new("/tmp/impress-full/estimator96.ckpt")).unwrap();
    for split in ["val", "eval"] {
        for spk in manifest.speaker_ids(split) {
            let recs: Vec<_> = manifest
                .records
                .iter()
                .filter(|r| r.speaker_id == spk)
                .collect();
            let mut se = 0.0f64;
            let mut n = 0;
            let mut worst = (0.0f64, ' ');
            for rec in &recs {
                let mel = manifest.load_mel(rec).unwrap();
                let stack = model.extract(&mel);
                let pred = model.estimate(&stack).unwrap();
                let truth = rec.label_vector();
                for d in ImpressionDim::LIKERT {
                    let e = (pred.get(d) - truth.get(d)).abs();
                    if e > worst.0 {
                        worst = (e, d.letter());
                    }
                    se += e * e;
                    n += 1;
                }
            }
            let factors = recs[0].label_vector();
            println!(
                "{split} {spk}: rmse {:.3} worst |err| {:.2} on {} | factors {:?}",
                (se / n as f64).sqrt(),
                worst.0,
                worst.1,
                factors.as_array().iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
            );
        }
    }
}
