//! Model checkpoints: a text manifest plus a binary parameter file.
//!
//! ```text
//! ckpt/
//!   manifest.txt   key = value, one per line
//!   params.bin     "KPRM", u32 count, then per parameter:
//!                  u32 name length, UTF-8 name, one serialized tensor
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::denoiser::BlockKind;
use crate::error::{Error, Result};
use crate::recon::{ArchConfig, DcConfig, DcTnnModel, LambdaMode};
use crate::tensor::RealTensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "dctnn-checkpoint 1";
const PARAMS_MAGIC: &[u8; 4] = b"KPRM";

fn config_lines(config: &DcConfig) -> Vec<(String, String)> {
    let kinds: Vec<_> = config.kinds.iter().map(|k| k.name()).collect();
    let a = &config.arch;
    let mut lines = vec![
        ("format".to_string(), FORMAT.to_string()),
        ("height".into(), config.height.to_string()),
        ("width".into(), config.width.to_string()),
        ("n_d".into(), config.n_d.to_string()),
        ("kinds".into(), kinds.join(",")),
        ("lambda".into(), config.lambda_mode.to_string()),
        ("token_size".into(), a.token_size.to_string()),
        ("d_model".into(), a.d_model.to_string()),
        ("axial_d_model".into(), a.axial_d_model.to_string()),
        ("n_layers".into(), a.n_layers.to_string()),
        ("n_heads".into(), a.n_heads.to_string()),
        ("ff_mult".into(), a.ff_mult.to_string()),
    ];
    for n in 0..config.n_d {
        let s = config.block_spec(n);
        lines.push((
            format!("block.{n}"),
            format!(
                "kind={} n_t={} d_model={} p={} H={} W={}",
                s.kind.name(),
                s.n_layers,
                s.d_model,
                s.token_size,
                s.height,
                s.width
            ),
        ));
    }
    lines
}

/// Manifest text for `model`, including learned lambdas and the step counter.
pub fn manifest(model: &DcTnnModel) -> String {
    let mut lines = config_lines(model.config());
    lines.push(("param_count".into(), model.param_count().to_string()));
    lines.push(("step".into(), model.store.step().to_string()));
    for (n, l) in model.lambdas().iter().enumerate() {
        let v = l.map_or("inf".to_string(), |v| v.to_string());
        lines.push((format!("lambda.{n}"), v));
    }
    lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected key = value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn field<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("manifest lacks {key:?}")))
}

fn num(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    field(map, key)?.parse().map_err(|_| Error::Format(format!("manifest {key:?} is not an integer")))
}

pub fn config_from_manifest(map: &BTreeMap<String, String>) -> Result<DcConfig> {
    if field(map, "format")? != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}", map["format"])));
    }
    Ok(DcConfig {
        n_d: num(map, "n_d")?,
        kinds: field(map, "kinds")?.split(',').map(BlockKind::parse).collect::<Result<_>>()?,
        lambda_mode: LambdaMode::parse(field(map, "lambda")?)?,
        arch: ArchConfig {
            token_size: num(map, "token_size")?,
            d_model: num(map, "d_model")?,
            axial_d_model: num(map, "axial_d_model")?,
            n_layers: num(map, "n_layers")?,
            n_heads: num(map, "n_heads")?,
            ff_mult: num(map, "ff_mult")?,
        },
        height: num(map, "height")?,
        width: num(map, "width")?,
    })
}

/// Line diff of the architecture entries; empty when consistent.
fn manifest_diff(found: &BTreeMap<String, String>, config: &DcConfig) -> Vec<String> {
    let mut diff = Vec::new();
    let expected = config_lines(config);
    for (k, v) in &expected {
        match found.get(k) {
            Some(f) if f == v => {}
            Some(f) => diff.push(format!("- {k} = {v}\n+ {k} = {f}")),
            None => diff.push(format!("- {k} = {v}\n+ (missing)")),
        }
    }
    for k in found.keys().filter(|k| k.starts_with("block.")) {
        if !expected.iter().any(|(e, _)| e == k) {
            diff.push(format!("- (absent)\n+ {k} = {}", found[k]));
        }
    }
    diff
}

pub fn write_params(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        p.value.write_to(w)?;
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Format("parameter file has a bad magic number".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        store.insert(name, RealTensor::read_from(r)?)?;
    }
    Ok(store)
}

pub fn save(model: &DcTnnModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(PARAMS_FILE))?);
    write_params(&model.store, &mut w)?;
    w.flush()?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest(model))?;
    Ok(())
}

/// Loads and cross-checks a checkpoint; inconsistencies are reported as a
/// manifest diff (`-` expected, `+` found).
pub fn load(dir: impl AsRef<Path>) -> Result<DcTnnModel> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let map = parse_manifest(&text)?;
    let config = config_from_manifest(&map)?;
    let diff = manifest_diff(&map, &config);
    if !diff.is_empty() {
        return Err(Error::Format(format!("manifest is inconsistent:\n{}", diff.join("\n"))));
    }
    let bytes = std::fs::read(dir.join(PARAMS_FILE))?;
    let mut store = read_params(&mut bytes.as_slice())
        .map_err(|e| Error::Format(format!("corrupt {}: {e}", PARAMS_FILE)))?;

    let reference = crate::recon::build_model(&config, 0)?;
    let mut diff = Vec::new();
    for (name, p) in reference.store.iter() {
        match store.get(name) {
            Some(t) if t.shape() == p.value.shape() => {}
            Some(t) => diff.push(format!("- {name} {:?}\n+ {name} {:?}", p.value.shape(), t.shape())),
            None => diff.push(format!("- {name} {:?}\n+ (missing)", p.value.shape())),
        }
    }
    for name in store.names().filter(|n| !reference.store.contains(n)) {
        diff.push(format!("- (absent)\n+ {name}"));
    }
    if !diff.is_empty() {
        return Err(Error::Format(format!("parameters do not match the manifest:\n{}", diff.join("\n"))));
    }
    if let Some(step) = map.get("step") {
        store.set_step(step.parse().map_err(|_| Error::Format("manifest step is not an integer".into()))?);
    }
    DcTnnModel::with_store(&config, store)
}
