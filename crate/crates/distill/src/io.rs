//! Run-directory files: one LTXT file per parameter tensor and the loss curve.

use std::fs;
use std::io::Write;
use std::path::Path;

use anatomy_core::ltxt::EmbeddingMatrix;
use anatomy_core::Result;

use crate::model::{shapes, EncoderConfig, EncoderParams, Params};
use crate::tensor::{Real, Tensor};
use crate::train::CurvePoint;

/// Writes `dir/<name>.ltxt` for every tensor, as 32-bit reals.
pub fn write_params<T: Real>(dir: &Path, params: &Params<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, _, t) in params.named() {
        let values = t.data.iter().map(|v| v.as_f64() as f32).collect();
        EmbeddingMatrix::new(t.rows, t.cols, values)?.write_path(dir.join(format!("{name}.ltxt")))?;
    }
    Ok(())
}

/// Reads a parameter set written by [`write_params`] and checks its shapes.
pub fn read_params<T: Real>(dir: &Path, config: &EncoderConfig) -> Result<Params<T>> {
    let layout = shapes(config);
    let items = layout
        .named()
        .into_iter()
        .map(|(name, _, _)| {
            let m = EmbeddingMatrix::read_path(dir.join(format!("{name}.ltxt")))?;
            Ok(Tensor::from_vec(m.rows(), m.cols(), m.values().iter().map(|&v| T::of(f64::from(v))).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = EncoderParams::from_ordered(config.n_layers, items)?;
    p.validate(config)?;
    Ok(p)
}

/// `step,mse,cos,consist,total`, one row per step.
pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = String::from("step,mse,cos,consist,total\n");
    for c in curve {
        out.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", c.step, c.mse, c.cos, c.consist, c.total));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
