//! Checks the three regulariser expansions on the trained toy translator at
//! every candidate slot, plus the layer-norm orthogonality probe.
//!
//! `cargo run --release --example toy_oracle -- [samples] [p]`

use unidrop::oracle::{orthogonality_probe, verify, DropoutKind, ProbeTarget, VerifyConfig};
use unidrop::toy::toy_translator;

fn main() -> unidrop::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let samples: usize = args.get(1).map_or(20_000, |s| s.parse().expect("samples"));
    let p: f64 = args.get(2).map_or(0.05, |s| s.parse().expect("p"));
    let toy = toy_translator(1)?;
    let cfg = VerifyConfig::new(p, samples, 11);
    for slot in toy.model.slot_names() {
        let target = ProbeTarget::new(&toy.model, toy.probe_batch.clone(), &slot, 0.0)?;
        let mut line = format!("{slot:<16}");
        let kinds: &[DropoutKind] = if slot.ends_with("embed") {
            &[DropoutKind::Feature, DropoutKind::Structure, DropoutKind::Data]
        } else {
            &[DropoutKind::Feature, DropoutKind::Structure]
        };
        for &kind in kinds {
            let r = verify(kind, &target, &cfg)?;
            line += &format!(" {}: {:.3}", kind.as_str(), r.mismatch.unwrap_or(f64::NAN));
        }
        line += &format!(" orthogonality {:.2e}", orthogonality_probe(&target)?.ratio);
        println!("{line}");
    }
    Ok(())
}
