//! One attention block in isolation: trunk and mask shapes, the mask range,
//! and the identity `(1 + 0) * T = T` under a zero-mask hook.
//!
//! ```bash
//! cargo run --release --example attention_block
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use res3atn::arch::{AttentionBlock, AttentionBlockSpec, BufferStore, Ctx, Fusion, MaskSource, ParamBuilder};
use res3atn::tensor::{BnMode, Tape, Tensor};

fn main() -> res3atn::Result<()> {
    let spec = AttentionBlockSpec::for_site(1, 16)?;
    let mut b = ParamBuilder::<f32>::new(3);
    let block = AttentionBlock::build(&mut b, "attention1", spec)?;
    let (params, mut buffers): (_, BufferStore<f32>) = b.finish();
    println!(
        "site {} depth {} skips {} ({} requested), {} parameters",
        spec.site,
        spec.depth,
        spec.realized_skips(),
        spec.skip_count,
        params.numel()
    );
    println!("mask scales for 8x28x28: {:?}", spec.mask_scales([8, 28, 28])?);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f32>::from_fn(&[2, 16, 8, 28, 28], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x);
    let mut ctx = Ctx::new(&mut tape, &params, &mut buffers, BnMode::Batch);
    let out = block.forward(&mut ctx, &xv, Fusion::Residual, &MaskSource::Branch)?;
    let m = out.mask.data();
    let (lo, hi) = m.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    println!("trunk {:?}, mask {:?}, mask range [{lo:.4}, {hi:.4}]", out.trunk.shape(), out.mask.shape());

    let zero = Tensor::zeros(out.trunk.shape());
    let hooked = block.forward(&mut ctx, &xv, Fusion::Residual, &MaskSource::Hook(zero))?;
    println!(
        "zero-mask hook: fused == trunk bitwise: {}",
        hooked.fused.value() == hooked.trunk.value()
    );
    Ok(())
}
