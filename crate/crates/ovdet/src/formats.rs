//! On-disk artifacts other than checkpoints.
//!
//! * `world.json`: the frozen world, with its seed and fingerprint.
//! * `det.jsonl`, `cls.jsonl`, `eval.jsonl`: a header line followed by
//!   one scene per line.
//! * `text_bank.txt`: `C D` on the first line, then one row per class.
//!   The background row is implied and never written.
//! * `pseudo_labels.jsonl`: a header line, then one record per
//!   classification scene.
//!
//! JSON headers carry `schema` and `version`; readers reject anything
//! else. Floats are written in shortest round-trip form, so reading a file
//! back reproduces every bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ovdet_core::embedbank::TextBank;
use ovdet_core::ils::PseudoBoxLabel;
use ovdet_core::simworld::{gen_datasets, gen_world, text_embeddings, Datasets, Scene, World, WorldConfig};
use ovdet_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const WORLD_FILE: &str = "world.json";
pub const BANK_FILE: &str = "text_bank.txt";
pub const PSEUDO_FILE: &str = "pseudo_labels.jsonl";
pub const SPLITS: [&str; 3] = ["det", "cls", "eval"];

/// Fails unless `dir` is an existing directory.
pub fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Path { path: dir.to_path_buf(), reason: "output directory does not exist" })
    }
}

/// Writes `bytes` to `path`, refusing to replace a file unless `force`.
pub fn write_new(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        require_dir(parent)?;
    }
    if path.exists() && !force {
        return Err(CliError::Exists { path: path.to_path_buf() });
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(CliError::Path { path: path.to_path_buf(), reason: "file not found" });
    }
    fs::read(path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|e| format_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    world_seed: u64,
    world_fingerprint: u64,
    count: usize,
}

impl Header {
    fn check(&self, path: &Path, schema: &str) -> Result<()> {
        if self.schema != schema {
            return Err(format_err(path, format!("expected schema {schema}, found {}", self.schema)));
        }
        if self.version != FORMAT_VERSION {
            return Err(format_err(path, format!("unsupported version {}", self.version)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    schema: String,
    version: u32,
    seed: u64,
    fingerprint: u64,
    world: World,
}

pub fn world_to_json(world: &World) -> Vec<u8> {
    let file = WorldFile {
        schema: "ovdet.world".into(),
        version: FORMAT_VERSION,
        seed: world.config.seed,
        fingerprint: world.fingerprint(),
        world: world.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("world serializes");
    out.push(b'\n');
    out
}

pub fn world_from_json(path: &Path, bytes: &[u8]) -> Result<World> {
    let file: WorldFile = serde_json::from_slice(bytes).map_err(|e| format_err(path, e))?;
    if file.schema != "ovdet.world" || file.version != FORMAT_VERSION {
        return Err(format_err(path, "not a version 1 world file"));
    }
    let mut world = file.world;
    world.config.seed = file.seed;
    let (c, l) = (world.config.num_classes(), world.config.latent_dim);
    let shapes_ok = world.prototypes.shape() == (c, l)
        && world.teacher_map.shape() == (world.config.embed_dim, l)
        && world.student_map.shape() == (world.config.feature_dim, l)
        && world.background_latent.len() == l;
    if !shapes_ok {
        return Err(format_err(path, "matrix shapes disagree with the world config"));
    }
    if world.fingerprint() != file.fingerprint {
        return Err(format_err(path, "fingerprint does not match contents"));
    }
    Ok(world)
}

pub fn scenes_to_jsonl(world: &World, split: &str, scenes: &[Scene]) -> Vec<u8> {
    let header = Header {
        schema: "ovdet.scenes".into(),
        version: FORMAT_VERSION,
        split: Some(split.into()),
        world_seed: world.config.seed,
        world_fingerprint: world.fingerprint(),
        count: scenes.len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for s in scenes {
        serde_json::to_writer(&mut out, s).expect("scene serializes");
        out.push(b'\n');
    }
    out
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    text: &str,
    schema: &str,
    world: &World,
) -> Result<(Header, Vec<T>)> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| format_err(path, "empty file"))?;
    let header: Header = serde_json::from_str(first).map_err(|e| format_err(path, e))?;
    header.check(path, schema)?;
    if header.world_fingerprint != world.fingerprint() {
        return Err(CliError::WorldMismatch { expected: world.fingerprint(), found: header.world_fingerprint });
    }
    let mut items = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        items.push(serde_json::from_str(line).map_err(|e| format_err(path, format!("line {}: {e}", i + 2)))?);
    }
    if items.len() != header.count {
        return Err(format_err(path, format!("header promises {} records, found {}", header.count, items.len())));
    }
    Ok((header, items))
}

pub fn scenes_from_jsonl(path: &Path, text: &str, world: &World) -> Result<Vec<Scene>> {
    Ok(parse_jsonl(path, text, "ovdet.scenes", world)?.1)
}

pub fn bank_to_text(bank: &TextBank) -> Vec<u8> {
    let m = bank.matrix();
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn bank_from_text(path: &Path, text: &str) -> Result<TextBank> {
    let mut lines = text.lines();
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format_err(path, e))?;
    let [c, d] = dims[..] else { return Err(format_err(path, "header must be `C D`")) };
    let mut rows = Vec::with_capacity(c);
    for line in lines.by_ref().take(c) {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, e))?;
        if row.len() != d {
            return Err(format_err(path, format!("row {} has {} values, expected {d}", rows.len(), row.len())));
        }
        rows.push(row);
    }
    if rows.len() != c || lines.any(|l| !l.trim().is_empty()) {
        return Err(format_err(path, format!("expected exactly {c} rows")));
    }
    TextBank::from_unit_rows(Matrix::from_rows(&rows)?, true).map_err(|e| format_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRecord {
    pub scene_id: u64,
    pub labels: Vec<PseudoBoxLabel>,
}

pub fn pseudo_to_jsonl(world: &World, records: &[PseudoRecord]) -> Vec<u8> {
    let header = Header {
        schema: "ovdet.pseudo_labels".into(),
        version: FORMAT_VERSION,
        split: Some("cls".into()),
        world_seed: world.config.seed,
        world_fingerprint: world.fingerprint(),
        count: records.len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn pseudo_from_jsonl(path: &Path, text: &str, world: &World) -> Result<Vec<PseudoRecord>> {
    Ok(parse_jsonl(path, text, "ovdet.pseudo_labels", world)?.1)
}

/// World, datasets and text bank, either read from a `gen` directory or
/// regenerated from the config.
pub struct Corpus {
    pub world: World,
    pub data: Datasets,
    pub bank: TextBank,
}

impl Corpus {
    pub fn generate(cfg: &WorldConfig) -> Result<Self> {
        let world = gen_world(cfg)?;
        let data = gen_datasets(&world);
        let bank = text_embeddings(&world)?;
        Ok(Self { world, data, bank })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(CliError::Path { path: dir.to_path_buf(), reason: "data directory does not exist" });
        }
        let wpath = dir.join(WORLD_FILE);
        let world = world_from_json(&wpath, &read(&wpath)?)?;
        let mut splits = Vec::with_capacity(3);
        for split in SPLITS {
            let p = dir.join(format!("{split}.jsonl"));
            splits.push(scenes_from_jsonl(&p, &read_text(&p)?, &world)?);
        }
        let eval = splits.pop().expect("three splits");
        let cls = splits.pop().expect("three splits");
        let det = splits.pop().expect("three splits");
        let bank = text_embeddings(&world)?;
        Ok(Self { world, data: Datasets { det, cls, eval }, bank })
    }

    /// Every file `gen` writes, in a fixed order.
    pub fn files(&self) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = vec![(WORLD_FILE.into(), world_to_json(&self.world))];
        for (split, scenes) in SPLITS.iter().zip([&self.data.det, &self.data.cls, &self.data.eval]) {
            out.push((format!("{split}.jsonl").into(), scenes_to_jsonl(&self.world, split, scenes)));
        }
        out.push((BANK_FILE.into(), bank_to_text(&self.bank)));
        out
    }

    /// Writes every file into `dir`; nothing is written if any target
    /// exists and `force` is off.
    pub fn write(&self, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
        require_dir(dir)?;
        let files = self.files();
        if !force {
            if let Some((name, _)) = files.iter().find(|(name, _)| dir.join(name).exists()) {
                return Err(CliError::Exists { path: dir.join(name) });
            }
        }
        let mut written = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            f.write_all(&bytes).map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ovdet_core::simworld::SceneKind;

    fn small() -> WorldConfig {
        WorldConfig { num_det: 6, num_cls: 5, num_eval: 4, seed: 3, ..Default::default() }
    }

    #[test]
    fn world_and_scenes_round_trip_bit_exactly() {
        let c = Corpus::generate(&small()).unwrap();
        let p = Path::new("mem");
        let world = world_from_json(p, &world_to_json(&c.world)).unwrap();
        assert_eq!(world, c.world);
        let text = String::from_utf8(scenes_to_jsonl(&c.world, "det", &c.data.det)).unwrap();
        let back = scenes_from_jsonl(p, &text, &world).unwrap();
        assert_eq!(back, c.data.det);
        assert!(back.iter().all(|s| s.kind == SceneKind::Detection));
        assert!(back.iter().flat_map(|s| &s.annotations).all(|a| world.config.is_base(a.1)));
    }

    #[test]
    fn bank_round_trip_and_rejections() {
        let c = Corpus::generate(&small()).unwrap();
        let p = Path::new("mem");
        let text = String::from_utf8(bank_to_text(&c.bank)).unwrap();
        let bank = bank_from_text(p, &text).unwrap();
        assert_eq!(bank.matrix(), c.bank.matrix());
        assert!(bank_from_text(p, "2 2\n1 0\n").is_err());
        assert!(bank_from_text(p, "1 2\n2 0\n").is_err());
        assert!(bank_from_text(p, "1 2\n1 0 0\n").is_err());
    }

    #[test]
    fn headers_are_checked() {
        let c = Corpus::generate(&small()).unwrap();
        let other = Corpus::generate(&WorldConfig { seed: 4, ..small() }).unwrap();
        let p = Path::new("mem");
        let text = String::from_utf8(scenes_to_jsonl(&c.world, "det", &c.data.det)).unwrap();
        assert!(matches!(scenes_from_jsonl(p, &text, &other.world), Err(CliError::WorldMismatch { .. })));
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(scenes_from_jsonl(p, &truncated, &c.world).is_err());
        let wrong = text.replacen("ovdet.scenes", "ovdet.other", 1);
        assert!(scenes_from_jsonl(p, &wrong, &c.world).is_err());
    }

    #[test]
    fn corpus_write_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::generate(&small()).unwrap();
        c.write(dir.path(), false).unwrap();
        assert!(matches!(c.write(dir.path(), false), Err(CliError::Exists { .. })));
        c.write(dir.path(), true).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.data, c.data);
        assert!(matches!(c.write(&dir.path().join("missing"), false), Err(CliError::Path { .. })));
    }
}
