//! Dynamic-static interaction (DSI): dense fusion of the two branch outputs,
//! guided by their concatenation.
//!
//! ```text
//! F_c  = [F_s, F_d]                      2C
//! F_c' = conv(F_c), F_s' = conv(F_s), F_d' = conv(F_d)        C each
//! I_s  = block([F_c', F_s']), I_d = block([F_c', F_d'])        C each
//! F_o  = block([I_s, I_d, F_c'])                               C
//! ```
//!
//! Every conv is 3×3 stride 1 followed by ReLU; a block is two convs.
//! Parameters under prefix `p`: `p.c`, `p.s`, `p.d`, `p.inter_s.conv{1,2}`,
//! `p.inter_d.conv{1,2}`, `p.out.conv{1,2}`.

use crate::error::{Error, Result};
use crate::pillars::BevFeatureMap;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub fn init_dsi(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    let c = channels;
    if c == 0 {
        return Err(Error::Config("DSI needs at least one channel".into()));
    }
    store.init_conv(&format!("{prefix}.c"), 2 * c, c, 3)?;
    store.init_conv(&format!("{prefix}.s"), c, c, 3)?;
    store.init_conv(&format!("{prefix}.d"), c, c, 3)?;
    for (block, cin) in [("inter_s", 2 * c), ("inter_d", 2 * c), ("out", 3 * c)] {
        store.init_conv(&format!("{prefix}.{block}.conv1"), cin, c, 3)?;
        store.init_conv(&format!("{prefix}.{block}.conv2"), c, c, 3)?;
    }
    Ok(())
}

fn conv_relu(tape: &mut Tape, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let y = tape.conv_named(params, name, x, 1, 1)?;
    Ok(tape.relu(y))
}

fn block(tape: &mut Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let y = conv_relu(tape, params, &format!("{prefix}.conv1"), x)?;
    conv_relu(tape, params, &format!("{prefix}.conv2"), y)
}

/// Intermediate maps of one DSI evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DsiVars {
    pub f_c: Var,
    pub f_c_prime: Var,
    pub f_s_prime: Var,
    pub f_d_prime: Var,
    pub f_o: Var,
}

pub fn dsi_on(
    tape: &mut Tape,
    static_out: Var,
    dynamic_out: Var,
    params: &ParamStore,
    prefix: &str,
) -> Result<DsiVars> {
    let s_shape = tape.value(static_out).dims3()?;
    let d_shape = tape.value(dynamic_out).dims3()?;
    if s_shape != d_shape {
        return Err(Error::Dimension(format!(
            "DSI inputs differ: static {s_shape:?}, dynamic {d_shape:?}"
        )));
    }
    let f_c = tape.concat(&[static_out, dynamic_out], 0)?;
    let f_c_prime = conv_relu(tape, params, &format!("{prefix}.c"), f_c)?;
    let f_s_prime = conv_relu(tape, params, &format!("{prefix}.s"), static_out)?;
    let f_d_prime = conv_relu(tape, params, &format!("{prefix}.d"), dynamic_out)?;
    let cs = tape.concat(&[f_c_prime, f_s_prime], 0)?;
    let i_s = block(tape, params, &format!("{prefix}.inter_s"), cs)?;
    let cd = tape.concat(&[f_c_prime, f_d_prime], 0)?;
    let i_d = block(tape, params, &format!("{prefix}.inter_d"), cd)?;
    let all = tape.concat(&[i_s, i_d, f_c_prime], 0)?;
    let f_o = block(tape, params, &format!("{prefix}.out"), all)?;
    Ok(DsiVars {
        f_c,
        f_c_prime,
        f_s_prime,
        f_d_prime,
        f_o,
    })
}

/// Values of every DSI stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DsiState {
    pub f_c: Tensor,
    pub f_c_prime: Tensor,
    pub f_s_prime: Tensor,
    pub f_d_prime: Tensor,
    pub f_o: Tensor,
}

pub fn dsi_state(
    static_out: &BevFeatureMap,
    dynamic_out: &BevFeatureMap,
    params: &ParamStore,
    prefix: &str,
) -> Result<DsiState> {
    let mut tape = Tape::new();
    let s = tape.constant(static_out.data.clone());
    let d = tape.constant(dynamic_out.data.clone());
    let v = dsi_on(&mut tape, s, d, params, prefix)?;
    Ok(DsiState {
        f_c: tape.value(v.f_c).clone(),
        f_c_prime: tape.value(v.f_c_prime).clone(),
        f_s_prime: tape.value(v.f_s_prime).clone(),
        f_d_prime: tape.value(v.f_d_prime).clone(),
        f_o: tape.value(v.f_o).clone(),
    })
}

pub fn dsi_forward(
    static_out: &BevFeatureMap,
    dynamic_out: &BevFeatureMap,
    params: &ParamStore,
    prefix: &str,
) -> Result<BevFeatureMap> {
    let state = dsi_state(static_out, dynamic_out, params, prefix)?;
    BevFeatureMap::new(state.f_o, static_out.stride_meters)
}
