//! Shapes through the fusion network and one attention gate.

use std::time::Instant;

use misr4d::network::{attention_gate, forward, init_model, Mode, ModelConfig};
use misr4d_tensor::Tensor;
use ndarray::Array3;

fn main() -> misr4d::Result<()> {
    let cfg = ModelConfig::default();
    let params = init_model(&cfg, 0)?;
    println!("{} trainable parameters", params.num_parameters());

    let views = Array3::from_shape_fn((16, 32, 32), |(v, i, j)| {
        1.0 + 0.01 * ((v + i * j) % 13) as f64
    });
    let t0 = Instant::now();
    let img = forward(&params, &views)?;
    println!(
        "(16, 32, 32) -> {:?} in {:.2} s",
        img.dim(),
        t0.elapsed().as_secs_f64()
    );

    let x = Tensor::full([1, 64, 8, 8], 1.0);
    let g = Tensor::full([1, 64, 8, 8], 0.5);
    let (_, alpha) = attention_gate(&params, 0, &x, &g, Mode::Eval)?;
    println!(
        "attention map range [{:.3}, {:.3}]",
        alpha.min(),
        alpha.max()
    );
    Ok(())
}
