use super::params::Bound;
use crate::autograd::{Graph, Var};
use crate::error::Result;

/// Source/target logits at the three alignment levels.
#[derive(Clone, Copy, Debug)]
pub struct DomainLogits {
    /// `[N, 1, H0, W0]` on the finest pyramid level.
    pub img_low: Var,
    /// `[N, 1, HL, WL]` on the coarsest pyramid level.
    pub img_high: Var,
    /// `[R, 1]` on pooled region features.
    pub ins: Var,
}

fn image_head(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = g.conv2d(
        x,
        p.var(&format!("disc.{name}.0.weight")),
        Some(p.var(&format!("disc.{name}.0.bias"))),
        1,
        1,
    )?;
    let h = g.relu(h);
    g.conv2d(
        h,
        p.var(&format!("disc.{name}.1.weight")),
        Some(p.var(&format!("disc.{name}.1.bias"))),
        1,
        0,
    )
}

/// Domain classifiers behind gradient reversal.
///
/// `levels` are the pyramid outputs and `pooled` the flattened region
/// features `[R, C·P·P]`. Each input first passes a reversal layer with
/// coefficient `reversal`, so the classifiers learn to tell domains apart while
/// the features upstream are pushed to confuse them.
pub fn discriminate_domain(
    g: &mut Graph,
    p: &Bound,
    levels: &[Var],
    pooled: Var,
    reversal: f64,
) -> Result<DomainLogits> {
    let low = g.grad_reverse(levels[0], reversal);
    let high = g.grad_reverse(*levels.last().expect("at least one level"), reversal);
    let img_low = image_head(g, p, "img_low", low)?;
    let img_high = image_head(g, p, "img_high", high)?;
    let ins = g.grad_reverse(pooled, reversal);
    let h = g.linear(
        ins,
        p.var("disc.ins.0.weight"),
        Some(p.var("disc.ins.0.bias")),
    )?;
    let h = g.relu(h);
    let ins = g.linear(
        h,
        p.var("disc.ins.1.weight"),
        Some(p.var("disc.ins.1.bias")),
    )?;
    Ok(DomainLogits {
        img_low,
        img_high,
        ins,
    })
}
