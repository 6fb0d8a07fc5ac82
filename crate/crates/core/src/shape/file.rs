//! Shape model files: a text header terminated by an `end_header` line,
//! followed by little-endian f64 arrays in this order: mean (d), modes
//! (d × m, column-major), eigenvalues (m), kernel samples (N × m, KDE only).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{join, KeyValues};
use crate::shape::model::{ModelKind, ShapeModel};

const MODULE: &str = "shape";
const MAGIC: &str = "cmfseg shape model v1";
const END: &[u8] = b"end_header\n";

pub fn encode_model(model: &ShapeModel) -> Vec<u8> {
    let mut kv = KeyValues::new();
    kv.set("kind", model.kind().name());
    kv.set("d", model.dim().to_string());
    kv.set("m", model.rank().to_string());
    kv.set("N", model.n_samples().to_string());
    kv.set(
        "sigma",
        model.sigma().map_or_else(|| "none".to_string(), |s| format!("{s:?}")),
    );
    kv.set("lambda_perp", format!("{:?}", model.lambda_perp()));
    kv.set("canonical_dims", join(&model.dims()));
    kv.set(
        "kernel_samples",
        if model.kernel_samples().is_some() { "yes" } else { "no" },
    );
    let mut out = format!("{MAGIC}\n{}", kv.to_text()).into_bytes();
    out.extend_from_slice(END);
    let arrays = [
        model.mean(),
        model.modes(),
        model.eigenvalues(),
        model.kernel_samples().unwrap_or(&[]),
    ];
    for arr in arrays {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ShapeModel> {
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .filter(|&p| p == 0 || bytes[p - 1] == b'\n')
        .ok_or_else(|| Error::invalid(MODULE, "shape model header has no end_header line"))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::invalid(MODULE, "shape model header is not UTF-8"))?;
    let Some(body) = header.strip_prefix(MAGIC) else {
        return Err(Error::invalid(MODULE, "not a shape model file"));
    };
    let kv = KeyValues::parse(body, MODULE)?;
    let need = |key: &str| -> Result<usize> {
        kv.parse_value(key, MODULE)?
            .ok_or_else(|| Error::invalid(MODULE, format!("missing key `{key}`")))
    };
    let kind: ModelKind = kv.require("kind", MODULE)?.parse()?;
    let d = need("d")?;
    let m = need("m")?;
    let n = need("N")?;
    let lambda_perp: f64 = kv
        .parse_value("lambda_perp", MODULE)?
        .ok_or_else(|| Error::invalid(MODULE, "missing key `lambda_perp`"))?;
    let sigma = match kv.require("sigma", MODULE)? {
        "none" => None,
        s => Some(
            s.parse::<f64>()
                .map_err(|_| Error::invalid(MODULE, format!("`sigma`: cannot parse {s:?}")))?,
        ),
    };
    let dims: [usize; 3] = kv
        .parse_array("canonical_dims", MODULE)?
        .ok_or_else(|| Error::invalid(MODULE, "missing key `canonical_dims`"))?;
    let has_kernels = match kv.require("kernel_samples", MODULE)? {
        "yes" => true,
        "no" => false,
        other => {
            return Err(Error::invalid(
                MODULE,
                format!("`kernel_samples`: expected yes or no, got {other:?}"),
            ))
        }
    };
    if dims.iter().product::<usize>() != d {
        return Err(Error::invalid(
            MODULE,
            format!("d = {d} does not match canonical_dims {dims:?}"),
        ));
    }

    let lens = [d, d * m, m, if has_kernels { n * m } else { 0 }];
    let payload = &bytes[split + END.len()..];
    let expected = lens.iter().sum::<usize>() * 8;
    if payload.len() != expected {
        return Err(Error::invalid(
            MODULE,
            format!("shape model payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |len: usize| -> Vec<f64> { values.by_ref().take(len).collect() };
    let mu = take(lens[0]);
    let modes = take(lens[1]);
    let eigenvalues = take(lens[2]);
    let kernels = take(lens[3]);
    ShapeModel::new(
        kind,
        dims,
        n,
        mu,
        modes,
        eigenvalues,
        lambda_perp,
        has_kernels.then_some(kernels),
        sigma,
    )
}

pub fn save_model(model: &ShapeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ShapeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
