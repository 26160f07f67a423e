//! On-disk offline database: a directory holding a `key=value` manifest and
//! raw little-endian `f64` arrays.
//!
//! Every array file starts with the 8-byte magic `RBLODARR`, a `u64`
//! dimension count and one `u64` extent per dimension, followed by the
//! row-major payload. Integers are stored as exactly representable floats.
//! Wall times are not stored, so rebuilding with the same inputs produces
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;

use crate::coeffs::{problem_by_name, ModelOptions, ParameterDomain, SoilParameters};
use crate::error::{Error, Result};
use crate::lod::Discretization;
use crate::rboffline::{
    AlphaRule, ElementPieces, GlobalMatrices, GreedyRound, LocalMatrices, LocalRBSpace, OfflineDb, PairBlock,
};

pub const ARRAY_MAGIC: &[u8; 8] = b"RBLODARR";
pub const FORMAT_VERSION: &str = "rblod-offline-1";
const MAX_DIMS: u64 = 8;

/// Writes one array file.
pub fn write_array(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::InvalidArgument(format!(
            "array of shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + 8 * shape.len() + 8 * data.len());
    bytes.extend_from_slice(ARRAY_MAGIC);
    bytes.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &e in shape {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads one array file, returning its shape and payload.
pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let word = |i: usize| -> Result<u64> {
        bytes
            .get(i..i + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
            .ok_or_else(|| format(format!("truncated header at byte {i}")))
    };
    if bytes.len() < 16 || &bytes[..8] != ARRAY_MAGIC {
        return Err(format("missing array magic".into()));
    }
    let ndims = word(8)?;
    if ndims > MAX_DIMS {
        return Err(format(format!("{ndims} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndims as usize);
    let mut count: u64 = 1;
    for d in 0..ndims as usize {
        let e = word(16 + 8 * d)?;
        count = count
            .checked_mul(e)
            .ok_or_else(|| format("extents overflow".into()))?;
        shape.push(usize::try_from(e).map_err(|_| format(format!("extent {e} too large")))?);
    }
    let header = 16 + 8 * ndims as usize;
    let payload = (bytes.len() - header.min(bytes.len())) as u64;
    if bytes.len() < header || count.checked_mul(8) != Some(payload) {
        return Err(format(format!(
            "shape {shape:?} needs {} payload bytes, file has {payload}",
            count.saturating_mul(8)
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    Ok((shape, data))
}

fn read_shaped(path: &Path, shape: &[usize]) -> Result<Vec<f64>> {
    let (found, data) = read_array(path)?;
    if found != shape {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected shape {shape:?}, found {found:?}"),
        });
    }
    Ok(data)
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let (shape, data) = read_array(path)?;
    if shape.len() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a vector, found shape {shape:?}"),
        });
    }
    Ok(data)
}

fn to_index(path: &Path, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
        Ok(v as usize)
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{v} is not an index"),
        })
    }
}

fn to_indices(path: &Path, v: &[f64]) -> Result<Vec<usize>> {
    v.iter().map(|&x| to_index(path, x)).collect()
}

fn indices(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&i| i as f64).collect()
}

fn rows_flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn split_rows(data: Vec<f64>, count: usize, len: usize) -> Vec<Vec<f64>> {
    (0..count).map(|r| data[r * len..(r + 1) * len].to_vec()).collect()
}

fn mat_flat(m: &Mat<f64>, out: &mut Vec<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn mat_from(data: &[f64], rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

fn mats_flat(ms: &[Mat<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in ms {
        mat_flat(m, &mut out);
    }
    out
}

fn mats_from(data: &[f64], count: usize, rows: usize, cols: usize) -> Vec<Mat<f64>> {
    (0..count)
        .map(|q| mat_from(&data[q * rows * cols..(q + 1) * rows * cols], rows, cols))
        .collect()
}

/// Parsed `key=value` manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
    path: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {} is not key=value", no + 1),
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest {
            entries,
            path: path.to_path_buf(),
        })
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries.get(key).map(String::as_str).ok_or_else(|| Error::Format {
            path: self.path.clone(),
            reason: format!("missing key '{key}'"),
        })
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Format {
            path: self.path.clone(),
            reason: format!("bad value '{raw}' for '{key}'"),
        })
    }
}

/// Mesh and problem parameters a caller expects a database to match.
#[derive(Debug, Clone, PartialEq)]
pub struct DbIdentity {
    pub problem: String,
    pub n_coarse: usize,
    pub levels: usize,
    pub k: Option<usize>,
}

impl DbIdentity {
    fn check(&self, m: &Manifest) -> Result<()> {
        let problem = m.get("problem")?;
        if problem != self.problem {
            return Err(Error::IncompatibleDatabase(format!(
                "database is for problem '{problem}', expected '{}'",
                self.problem
            )));
        }
        for (key, want) in [("n_coarse", Some(self.n_coarse)), ("levels", Some(self.levels)), ("k", self.k)] {
            let found: usize = m.parse(key)?;
            if let Some(want) = want {
                if found != want {
                    return Err(Error::IncompatibleDatabase(format!("{key} is {found}, expected {want}")));
                }
            }
        }
        Ok(())
    }
}

fn node_dir(root: &Path, zi: usize) -> PathBuf {
    root.join("nodes").join(format!("{zi:05}"))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn manifest_text(db: &OfflineDb) -> String {
    let p = &db.disc.problem;
    let riesz = db.spaces.iter().flat_map(|s| &s.pieces).all(|p| p.riesz.is_some());
    let lines = [
        ("format", FORMAT_VERSION.to_string()),
        ("problem", p.id.clone()),
        ("epsilon", format!("{:?}", p.epsilon)),
        ("domain_lower", format!("{:?}", p.parameter_domain.lower)),
        ("domain_upper", format!("{:?}", p.parameter_domain.upper)),
        ("nonlinear", p.nonlinear.to_string()),
        ("n_coarse", db.n_coarse.to_string()),
        ("levels", db.levels.to_string()),
        ("k", db.k.to_string()),
        ("seed", db.seed.to_string()),
        ("generator", crate::rboffline::GENERATOR_ID.to_string()),
        ("tol", format!("{:?}", db.tol)),
        ("j_max", db.j_max.to_string()),
        ("alpha_rule", db.alpha_rule.name().to_string()),
        ("alpha_hat", format!("{:?}", db.alpha_hat)),
        ("training_size", db.training.len().to_string()),
        ("q_count", db.q_count().to_string()),
        ("nodes", db.spaces.len().to_string()),
        ("pairs", db.global.blocks.len().to_string()),
        ("soils", p.soils.is_some().to_string()),
        ("riesz", riesz.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in lines {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

fn save_node(dir: &Path, space: &LocalRBSpace, local: &LocalMatrices, q_count: usize) -> Result<()> {
    mkdir(dir)?;
    let j = space.dim();
    let scalars = [
        space.node as f64,
        space.interior_index as f64,
        space.c_z as f64,
        space.hat_norm,
        if space.converged { 1.0 } else { 0.0 },
        space.pieces.len() as f64,
    ];
    write_array(&dir.join("scalars.f64"), &[scalars.len()], &scalars)?;
    let sel = space.selected_parameters.len();
    let mut selected = space.selected_parameters.clone();
    selected.extend(space.selected_indices.iter().map(|i| i.map_or(-1.0, |i| i as f64)));
    write_array(&dir.join("selected.f64"), &[2, sel], &selected)?;
    write_array(
        &dir.join("rejected.f64"),
        &[space.rejected_indices.len()],
        &indices(&space.rejected_indices),
    )?;
    let history: Vec<f64> = space
        .history
        .iter()
        .flat_map(|r| [r.parameter, r.max_relative, r.max_absolute])
        .collect();
    write_array(&dir.join("history.f64"), &[space.history.len(), 3], &history)?;
    write_array(&dir.join("support.f64"), &[space.support.len()], &indices(&space.support))?;
    write_array(&dir.join("snapshots.f64"), &[j, space.support.len()], &rows_flat(&space.snapshots))?;
    write_array(&dir.join("local_stiffness.f64"), &[q_count, j, j], &mats_flat(&local.stiffness))?;
    write_array(&dir.join("local_coupling.f64"), &[q_count, j], &rows_flat(&local.coupling))?;
    for (pi, p) in space.pieces.iter().enumerate() {
        let pre = |name: &str| dir.join(format!("piece{pi:02}_{name}.f64"));
        let d = p.dofs.len();
        let g = p.riesz_gram.nrows();
        write_array(&pre("element"), &[1], &[p.element as f64])?;
        write_array(&pre("dofs"), &[d], &indices(&p.dofs))?;
        write_array(&pre("snapshots"), &[j, d], &rows_flat(&p.snapshots))?;
        write_array(&pre("galerkin"), &[q_count, j, j], &mats_flat(&p.galerkin))?;
        write_array(&pre("load"), &[q_count, j], &rows_flat(&p.load))?;
        write_array(&pre("gram"), &[g, g], &mats_flat(std::slice::from_ref(&p.riesz_gram)))?;
        write_array(
            &pre("factor"),
            &[p.riesz_factor.nrows(), g],
            &mats_flat(std::slice::from_ref(&p.riesz_factor)),
        )?;
        if let Some(r) = &p.riesz {
            write_array(&pre("riesz"), &[r.len(), d], &rows_flat(r))?;
        }
    }
    Ok(())
}

fn save_global(dir: &Path, global: &GlobalMatrices, q_count: usize) -> Result<()> {
    mkdir(dir)?;
    let b = global.blocks.len();
    let pairs: Vec<f64> = global.blocks.iter().flat_map(|p| [p.n as f64, p.m as f64]).collect();
    write_array(&dir.join("pairs.f64"), &[b, 2], &pairs)?;
    let coarse: Vec<f64> = global.blocks.iter().flat_map(|p| p.coarse.iter().copied()).collect();
    write_array(&dir.join("coarse.f64"), &[b, q_count], &coarse)?;
    let coupling: Vec<f64> = global.blocks.iter().flat_map(|p| rows_flat(&p.coupling)).collect();
    write_array(&dir.join("coupling.f64"), &[coupling.len()], &coupling)?;
    let fine: Vec<f64> = global.blocks.iter().flat_map(|p| mats_flat(&p.fine)).collect();
    write_array(&dir.join("fine.f64"), &[fine.len()], &fine)?;
    Ok(())
}

/// Writes `db` to the directory `path`.
///
/// The database is written to a sibling staging directory first and moved
/// into place at the end, so a failure leaves no partial output. An
/// existing directory is replaced only when it holds a database manifest.
pub fn save_offline(db: &OfflineDb, path: &Path) -> Result<()> {
    if path.exists() && !path.join("manifest.txt").is_file() {
        return Err(Error::InvalidArgument(format!(
            "{} exists and is not an offline database",
            path.display()
        )));
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let staging = path.with_file_name(format!(".{}.partial", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(format!("removing {}", staging.display()), e))?;
    }
    let result = save_into(db, &staging).and_then(|()| {
        if path.exists() {
            fs::remove_dir_all(path).map_err(|e| Error::io(format!("removing {}", path.display()), e))?;
        }
        fs::rename(&staging, path).map_err(|e| Error::io(format!("moving {} into place", staging.display()), e))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn save_into(db: &OfflineDb, root: &Path) -> Result<()> {
    mkdir(root)?;
    let q = db.q_count();
    write_array(&root.join("training.f64"), &[db.training.len()], &db.training)?;
    if let Some(soils) = &db.disc.problem.soils {
        let flat: Vec<f64> = soils
            .iter()
            .flat_map(|s| [s.theta_min, s.theta_max, s.lambda, s.bubbling_pressure])
            .collect();
        write_array(&root.join("soils.f64"), &[4, 4], &flat)?;
    }
    for (zi, (space, local)) in db.spaces.iter().zip(&db.local).enumerate() {
        save_node(&node_dir(root, zi), space, local, q)?;
    }
    save_global(&root.join("global"), &db.global, q)?;
    let manifest = root.join("manifest.txt");
    fs::write(&manifest, manifest_text(db)).map_err(|e| Error::io(format!("writing {}", manifest.display()), e))
}

/// Reads only the manifest of a database directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::read(&path.join("manifest.txt"))?;
    let format = m.get("format")?;
    if format != FORMAT_VERSION {
        return Err(Error::IncompatibleDatabase(format!(
            "format '{format}', this build reads '{FORMAT_VERSION}'"
        )));
    }
    Ok(m)
}

/// Loads a database and checks it against `expected`.
pub fn load_compatible(path: &Path, expected: &DbIdentity) -> Result<OfflineDb> {
    expected.check(&read_manifest(path)?)?;
    load_offline(path)
}

/// Loads a database written by [`save_offline`]. The discretization is
/// rebuilt from the manifest.
pub fn load_offline(path: &Path) -> Result<OfflineDb> {
    let m = read_manifest(path)?;
    let problem_id: String = m.parse("problem")?;
    let soils = if m.parse::<bool>("soils")? {
        let p = path.join("soils.f64");
        let flat = read_shaped(&p, &[4, 4])?;
        let mut out = [SoilParameters {
            theta_min: 0.0,
            theta_max: 0.0,
            lambda: 0.0,
            bubbling_pressure: 0.0,
        }; 4];
        for (s, c) in out.iter_mut().zip(flat.chunks_exact(4)) {
            *s = SoilParameters::new(c[0], c[1], c[2], c[3])?;
        }
        Some(out)
    } else {
        None
    };
    let options = ModelOptions {
        epsilon: Some(m.parse("epsilon")?),
        domain: Some(ParameterDomain::new(m.parse("domain_lower")?, m.parse("domain_upper")?)?),
        soils,
    };
    let problem = problem_by_name(&problem_id, &options)?;
    let n_coarse: usize = m.parse("n_coarse")?;
    let levels: usize = m.parse("levels")?;
    let disc = Discretization::new(problem, n_coarse, levels)?;
    let q = disc.q_count();
    if m.parse::<usize>("q_count")? != q {
        return Err(Error::IncompatibleDatabase(format!(
            "manifest has {} affine terms, problem '{problem_id}' has {q}",
            m.get("q_count")?
        )));
    }
    let nodes: usize = m.parse("nodes")?;
    if nodes != disc.coarse_dim() {
        return Err(Error::IncompatibleDatabase(format!(
            "{nodes} nodes stored, mesh has {}",
            disc.coarse_dim()
        )));
    }
    let alpha_rule = AlphaRule::parse(m.get("alpha_rule")?)?;
    let training = read_shaped(&path.join("training.f64"), &[m.parse("training_size")?])?;
    let mut spaces = Vec::with_capacity(nodes);
    let mut local = Vec::with_capacity(nodes);
    for zi in 0..nodes {
        let (s, l) = load_node(&node_dir(path, zi), q)?;
        if s.interior_index != zi {
            return Err(Error::InconsistentDatabase(format!("node directory {zi} holds node {}", s.interior_index)));
        }
        spaces.push(s);
        local.push(l);
    }
    let dims: Vec<usize> = spaces.iter().map(LocalRBSpace::dim).collect();
    let global = load_global(&path.join("global"), q, m.parse("pairs")?, &dims)?;
    Ok(OfflineDb {
        disc,
        n_coarse,
        levels,
        k: m.parse("k")?,
        seed: m.parse("seed")?,
        tol: m.parse("tol")?,
        j_max: m.parse("j_max")?,
        training,
        alpha_rule,
        alpha_hat: m.parse("alpha_hat")?,
        spaces,
        local,
        global,
    })
}

fn load_node(dir: &Path, q: usize) -> Result<(LocalRBSpace, LocalMatrices)> {
    let f = |name: &str| dir.join(name);
    let scalars = read_shaped(&f("scalars.f64"), &[6])?;
    let sp = f("scalars.f64");
    let n_pieces = to_index(&sp, scalars[5])?;
    let (shape, selected) = read_array(&f("selected.f64"))?;
    if shape.len() != 2 || shape[0] != 2 {
        return Err(Error::Format {
            path: f("selected.f64"),
            reason: format!("expected shape [2, n], found {shape:?}"),
        });
    }
    let sel = shape[1];
    let selected_indices = selected[sel..]
        .iter()
        .map(|&v| if v < 0.0 { Ok(None) } else { to_index(&f("selected.f64"), v).map(Some) })
        .collect::<Result<Vec<_>>>()?;
    let rejected_indices = to_indices(&f("rejected.f64"), &read_vector(&f("rejected.f64"))?)?;
    let (shape, history) = read_array(&f("history.f64"))?;
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Format {
            path: f("history.f64"),
            reason: format!("expected shape [n, 3], found {shape:?}"),
        });
    }
    let history = history
        .chunks_exact(3)
        .map(|c| GreedyRound {
            parameter: c[0],
            max_relative: c[1],
            max_absolute: c[2],
        })
        .collect();
    let support = to_indices(&f("support.f64"), &read_vector(&f("support.f64"))?)?;
    let (shape, snaps) = read_array(&f("snapshots.f64"))?;
    if shape.len() != 2 || shape[1] != support.len() {
        return Err(Error::Format {
            path: f("snapshots.f64"),
            reason: format!("expected shape [J, {}], found {shape:?}", support.len()),
        });
    }
    let j = shape[0];
    let snapshots = split_rows(snaps, j, support.len());
    let stiffness = mats_from(&read_shaped(&f("local_stiffness.f64"), &[q, j, j])?, q, j, j);
    let coupling = split_rows(read_shaped(&f("local_coupling.f64"), &[q, j])?, q, j);
    let mut pieces = Vec::with_capacity(n_pieces);
    for pi in 0..n_pieces {
        let pre = |name: &str| dir.join(format!("piece{pi:02}_{name}.f64"));
        let element = to_index(&pre("element"), read_shaped(&pre("element"), &[1])?[0])?;
        let dofs = to_indices(&pre("dofs"), &read_vector(&pre("dofs"))?)?;
        let d = dofs.len();
        let g = q * (1 + j);
        let riesz = if pre("riesz").is_file() {
            Some(split_rows(read_shaped(&pre("riesz"), &[g, d])?, g, d))
        } else {
            None
        };
        let (factor_shape, factor) = read_array(&pre("factor"))?;
        if factor_shape.len() != 2 || factor_shape[1] != g || factor_shape[0] > g {
            return Err(Error::Format {
                path: pre("factor"),
                reason: format!("expected shape [m <= {g}, {g}], found {factor_shape:?}"),
            });
        }
        pieces.push(ElementPieces {
            element,
            snapshots: split_rows(read_shaped(&pre("snapshots"), &[j, d])?, j, d),
            galerkin: mats_from(&read_shaped(&pre("galerkin"), &[q, j, j])?, q, j, j),
            load: split_rows(read_shaped(&pre("load"), &[q, j])?, q, j),
            riesz_gram: mat_from(&read_shaped(&pre("gram"), &[g, g])?, g, g),
            riesz_factor: mat_from(&factor, factor_shape[0], g),
            riesz,
            dofs,
        });
    }
    let space = LocalRBSpace {
        node: to_index(&sp, scalars[0])?,
        interior_index: to_index(&sp, scalars[1])?,
        selected_parameters: selected[..sel].to_vec(),
        selected_indices,
        rejected_indices,
        history,
        converged: scalars[4] != 0.0,
        support,
        snapshots,
        pieces,
        c_z: to_index(&sp, scalars[2])?,
        hat_norm: scalars[3],
        seconds: 0.0,
    };
    Ok((space, LocalMatrices { stiffness, coupling }))
}

fn load_global(dir: &Path, q: usize, count: usize, dims: &[usize]) -> Result<GlobalMatrices> {
    let pairs_path = dir.join("pairs.f64");
    let pairs = to_indices(&pairs_path, &read_shaped(&pairs_path, &[count, 2])?)?;
    let coarse = read_shaped(&dir.join("coarse.f64"), &[count, q])?;
    let coupling = read_vector(&dir.join("coupling.f64"))?;
    let fine = read_vector(&dir.join("fine.f64"))?;
    let (mut ci, mut fi) = (0, 0);
    let mut blocks = Vec::with_capacity(count);
    for b in 0..count {
        let (n, m) = (pairs[2 * b], pairs[2 * b + 1]);
        if n >= dims.len() || m >= dims.len() {
            return Err(Error::InconsistentDatabase(format!("pair ({n}, {m}) names a missing node")));
        }
        let (jn, jm) = (dims[n], dims[m]);
        if coupling.len() < ci + q * jm || fine.len() < fi + q * jn * jm {
            return Err(Error::InconsistentDatabase(format!("pair blocks end early at ({n}, {m})")));
        }
        blocks.push(PairBlock {
            n,
            m,
            coarse: coarse[b * q..(b + 1) * q].to_vec(),
            coupling: split_rows(coupling[ci..ci + q * jm].to_vec(), q, jm),
            fine: mats_from(&fine[fi..fi + q * jn * jm], q, jn, jm),
        });
        ci += q * jm;
        fi += q * jn * jm;
    }
    if ci != coupling.len() || fi != fine.len() {
        return Err(Error::InconsistentDatabase("pair blocks carry trailing data".into()));
    }
    Ok(GlobalMatrices { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{model_problem_1, model_problem_2};
    use crate::rboffline::{build_offline, generate_training_set, OfflineConfig};
    use crate::rbonline::online_solve;

    fn small_db(problem: crate::coeffs::ProblemDefinition, retain: bool) -> OfflineDb {
        let disc = Discretization::new(problem, 4, 1).unwrap();
        let training = generate_training_set(&disc.problem.parameter_domain, 6, 11).unwrap();
        let mut cfg = OfflineConfig::new(1, 0.05, training);
        cfg.retain_riesz = retain;
        build_offline(disc, 4, 1, &cfg).unwrap()
    }

    fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn array_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f64");
        let data = [1.5, -0.0, f64::MIN_POSITIVE, 1e300, 2.0, 3.0];
        write_array(&p, &[2, 3], &data).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"RBLODARR");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 8 + 8 + 16 + 48);
        let (shape, back) = read_array(&p).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        write_array(&p, &[0], &[]).unwrap();
        assert_eq!(read_array(&p).unwrap(), (vec![0], vec![]));
        assert!(write_array(&p, &[2, 2], &data).is_err());
    }

    #[test]
    fn corrupted_arrays_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f64");
        write_array(&p, &[3], &[1.0, 2.0, 3.0]).unwrap();
        let good = fs::read(&p).unwrap();
        let mut bad = good.clone();
        bad[16..24].copy_from_slice(&4u64.to_le_bytes());
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_array(&p), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_array(&p), Err(Error::Format { .. })));
        fs::write(&p, &good[..20]).unwrap();
        assert!(matches!(read_array(&p), Err(Error::Format { .. })));
        fs::write(&p, b"NOTARRAY0000000000000000").unwrap();
        assert!(matches!(read_array(&p), Err(Error::Format { .. })));
        assert!(matches!(read_array(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn database_round_trip_is_lossless() {
        let db = small_db(model_problem_1(), true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db");
        save_offline(&db, &path).unwrap();
        let back = load_offline(&path).unwrap();
        assert_eq!(back.dimensions(), db.dimensions());
        assert_eq!(back.training, db.training);
        assert_eq!(back.alpha_hat.to_bits(), db.alpha_hat.to_bits());
        for (a, b) in back.spaces.iter().zip(&db.spaces) {
            assert_eq!(a.snapshots, b.snapshots);
            assert_eq!(a.support, b.support);
            assert_eq!(a.selected_indices, b.selected_indices);
            assert_eq!(a.history.len(), b.history.len());
            assert_eq!(a.pieces.len(), b.pieces.len());
            for (p, r) in a.pieces.iter().zip(&b.pieces) {
                assert_eq!(p.riesz, r.riesz);
                assert_eq!(p.riesz_gram, r.riesz_gram);
                assert_eq!(p.riesz_factor, r.riesz_factor);
            }
        }
        assert_eq!(back.global.blocks.len(), db.global.blocks.len());
        let u = online_solve(&db, 2.5).unwrap().coefficients;
        let v = online_solve(&back, 2.5).unwrap().coefficients;
        assert_eq!(u, v);
        let again = dir.path().join("again");
        save_offline(&back, &again).unwrap();
        assert_eq!(files(&path), files(&again));
    }

    #[test]
    fn rebuilding_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_offline(&small_db(model_problem_2(), false), &a).unwrap();
        save_offline(&small_db(model_problem_2(), false), &b).unwrap();
        assert_eq!(files(&a), files(&b));
        let back = load_offline(&a).unwrap();
        assert!(back.disc.problem.soils.is_some());
        assert!(back.spaces[0].pieces.iter().all(|p| p.riesz.is_none()));
    }

    #[test]
    fn mismatches_are_rejected() {
        let db = small_db(model_problem_1(), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db");
        save_offline(&db, &path).unwrap();
        let ok = DbIdentity {
            problem: "mp1".into(),
            n_coarse: 4,
            levels: 1,
            k: Some(1),
        };
        assert!(load_compatible(&path, &ok).is_ok());
        for wrong in [
            DbIdentity { n_coarse: 8, ..ok.clone() },
            DbIdentity { levels: 2, ..ok.clone() },
            DbIdentity { k: Some(2), ..ok.clone() },
            DbIdentity { problem: "mp2".into(), ..ok.clone() },
        ] {
            assert!(matches!(load_compatible(&path, &wrong), Err(Error::IncompatibleDatabase(_))));
        }
        let manifest = path.join("manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace(FORMAT_VERSION, "rblod-offline-0")).unwrap();
        assert!(matches!(load_offline(&path), Err(Error::IncompatibleDatabase(_))));
        fs::write(&manifest, &text).unwrap();
        let arr = path.join("nodes/00000/snapshots.f64");
        let mut bytes = fs::read(&arr).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&arr, bytes).unwrap();
        assert!(matches!(load_offline(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn foreign_directories_are_not_overwritten() {
        let db = small_db(model_problem_1(), false);
        let dir = tempfile::tempdir().unwrap();
        let precious = dir.path().join("data");
        fs::create_dir(&precious).unwrap();
        fs::write(precious.join("keep.txt"), "x").unwrap();
        assert!(save_offline(&db, &precious).is_err());
        assert!(precious.join("keep.txt").is_file());
        assert!(!dir.path().join(".data.partial").exists());
    }
}
