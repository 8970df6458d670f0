//! Parameter registration and graph helpers shared by the network parts.

use crate::diffops::{Graph, Init, ParameterStore, Real, Var};
use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.01;

pub(crate) fn register_conv<T: Real>(
    store: &mut ParameterStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    store.register(
        format!("{name}.weight"),
        &[cout, cin, k, k, k],
        Init::KaimingNormal { fan_in: cin * k * k * k },
    )?;
    store.register(format!("{name}.bias"), &[cout], Init::Constant(0.0))
}

pub(crate) fn register_conv_transpose<T: Real>(
    store: &mut ParameterStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
) -> Result<()> {
    store.register(
        format!("{name}.weight"),
        &[cin, cout, 2, 2, 2],
        Init::KaimingNormal { fan_in: cin * 8 },
    )?;
    store.register(format!("{name}.bias"), &[cout], Init::Constant(0.0))
}

pub(crate) fn register_norm<T: Real>(store: &mut ParameterStore<T>, name: &str, ch: usize) -> Result<()> {
    store.register(format!("{name}.gamma"), &[ch], Init::Constant(1.0))?;
    store.register(format!("{name}.beta"), &[ch], Init::Constant(0.0))
}

pub(crate) fn register_linear<T: Real>(
    store: &mut ParameterStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.register(
        format!("{name}.weight"),
        &[fan_out, fan_in],
        Init::KaimingNormal { fan_in },
    )?;
    store.register(format!("{name}.bias"), &[fan_out], Init::Constant(0.0))
}

/// Registers `{name}.conv` and, when `norm` is set, `{name}.norm`.
pub(crate) fn register_conv_block<T: Real>(
    store: &mut ParameterStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    norm: bool,
) -> Result<()> {
    register_conv(store, &format!("{name}.conv"), cin, cout, 3)?;
    if norm {
        register_norm(store, &format!("{name}.norm"), cout)?;
    }
    Ok(())
}

pub(crate) fn conv<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    g.tape.conv3d(x, w, Some(b), stride)
}

pub(crate) fn conv_transpose<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    g.tape.conv_transpose3d(x, w, Some(b))
}

/// conv3 → instance norm → leaky ReLU, or a bare conv when `norm` is off.
pub(crate) fn conv_block<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, stride: usize, norm: bool) -> Result<Var> {
    let y = conv(g, &format!("{name}.conv"), x, stride)?;
    if !norm {
        return Ok(y);
    }
    let gamma = g.param(&format!("{name}.norm.gamma"))?;
    let beta = g.param(&format!("{name}.norm.beta"))?;
    let y = g.tape.instance_norm(y, gamma, beta)?;
    Ok(g.tape.leaky_relu(y, LEAKY_SLOPE))
}

/// Parameter count of a `k³` conv with bias.
pub fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    k * k * k * cin * cout + cout
}

/// FLOPs (two per multiply-add) of a `k³` conv producing `out_voxels` voxels.
pub fn conv_flops(cin: usize, cout: usize, k: usize, out_voxels: usize) -> u64 {
    2 * (k * k * k * cin * cout) as u64 * out_voxels as u64
}
