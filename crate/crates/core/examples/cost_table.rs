//! MAC and parameter accounting for a model and its all-replaced student.
//!
//! cargo run --example cost_table [model]

use pbkd::model::{count_macs_params, layer_cost, ModelSpec, Network};
use pbkd::replacement::default_replacement;
use pbkd::tensor::{LayerKind, LayerParams, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pbkd::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "vgg16_cifar".into());
    let spec = ModelSpec::load(&name)?;
    let teacher: Network = Network::from_spec(&spec, 0)?;
    let table = count_macs_params(&teacher, spec.input_shape)?;
    println!("{table}\n");

    let mut student = teacher.clone();
    for k in teacher.identify_replaceable() {
        let block = default_replacement(teacher.replaced_conv(k)?, k, k as u64)?;
        student = student.with_replacement(k, block)?;
    }
    let st = count_macs_params(&student, spec.input_shape)?;
    println!(
        "teacher {} MACs, {} params\nstudent {} MACs, {} params\nMAC ratio {:.4}",
        table.total_macs,
        table.total_params,
        st.total_macs,
        st.total_params,
        st.total_macs as f64 / table.total_macs as f64
    );

    // One 3x3 conv against its depthwise-separable counterpart.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Shape::new(1, 64, 32, 32);
    let (_, conv, _) = layer_cost(&LayerParams::<f32>::conv(LayerKind::Conv3x3, 64, 64, 1, 1, &mut rng)?, x)?;
    let (_, dw, _) = layer_cost(&LayerParams::<f32>::depthwise(64, 1, 1, &mut rng)?, x)?;
    let (_, pw, _) = layer_cost(&LayerParams::<f32>::pointwise(64, 64, &mut rng)?, x)?;
    println!("\nseparable/standard MACs at C=64: {}/{conv} = {:.5}", dw + pw, (dw + pw) as f64 / conv as f64);
    Ok(())
}
