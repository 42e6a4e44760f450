//! Saves a network to the checkpoint format, reloads it into a fresh
//! network, and confirms bitwise-identical forward outputs; then shows the
//! errors for a truncated file and for a mismatched architecture.
//!
//! ```bash
//! cargo run --release --example checkpoint
//! ```

use res3atn::arch::{build_res3atn, NetworkSpec};
use res3atn::tensor::{BnMode, Tape, Tensor, Var};
use res3atn::train::Checkpoint;

fn main() -> res3atn::Result<()> {
    let spec = NetworkSpec {
        num_classes: 4,
        input_frames: 8,
        channel_scale: 16,
        input_size: 32,
        ..NetworkSpec::default()
    };
    let mut net = build_res3atn::<f32>(&spec)?;
    let named = net.named_tensors().into_iter().collect();
    net.load_named(&named)?;
    let ck = Checkpoint::capture(&net, None, 0, "");
    let bytes = ck.to_bytes()?;
    println!("{} tensors, {} bytes", ck.tensors.len(), bytes.len());

    let back = Checkpoint::from_bytes(&bytes, "memory".as_ref())?;
    println!("re-encoded identically: {}", back.to_bytes()? == bytes);
    let mut other = build_res3atn::<f32>(&NetworkSpec { seed: 99, ..spec.clone() })?;
    back.restore(&mut other, None)?;
    let x = Var::constant(Tensor::from_fn(&spec.input_shape(2), |i| (i % 17) as f32 / 17.0));
    let a = net.forward(&mut Tape::no_grad(), &x, BnMode::Eval)?;
    let b = other.forward(&mut Tape::no_grad(), &x, BnMode::Eval)?;
    println!("forward outputs bitwise equal: {}", a.logits.value() == b.logits.value());

    if let Err(e) = Checkpoint::from_bytes(&bytes[..bytes.len() / 2], "half.ckpt".as_ref()) {
        println!("truncated: {e}");
    }
    let mut baseline = build_res3atn::<f32>(&spec.clone().with_sites(&[]))?;
    if let Err(e) = back.restore(&mut baseline, None) {
        let msg = e.to_string();
        println!("into a no-attention network: {}...", &msg[..msg.len().min(160)]);
    }
    Ok(())
}
