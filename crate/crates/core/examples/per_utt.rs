//! Per-speaker estimator error breakdown. Exploratory tool.

use impress_core::corpus::load_manifest;
use impress_core::estimator::EstimatorModel;
use impress_core::impression::ImpressionDim;

fn main() {
    let manifest = load_manifest(std::path::Path::new("/tmp/impress-full/corpus")).unwrap();
    let model = EstimatorModel::load(std::path::Path::new("/tmp/impress-full/est_exp.ckpt")).unwrap();
    for split in ["evalutt"] {
        
        for rec in manifest.records.iter().filter(|r| r.speaker_id == "spk038") {
            let mel = manifest.load_mel(rec).unwrap();
            let stack = model.extract(&mel);
            let pred = model.estimate(&stack).unwrap();
            let truth = rec.label_vector();
            let mut se = 0.0f64;
            for d in ImpressionDim::LIKERT {
                let e = pred.get(d) - truth.get(d);
                se += e * e;
            }
            println!("{} T={} rmse {:.3}", rec.utt_id, mel.frames(), (se / 10.0).sqrt());
        }
   }
}
