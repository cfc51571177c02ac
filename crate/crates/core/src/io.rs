//! Text and raw-binary file formats.
//!
//! Volumes are a `.vhdr` text header plus a `.vraw` payload of little-endian
//! f32 values, x fastest. Everything else is line-oriented text whose floats
//! are written in Rust's shortest round-trip form, so reading back gives the
//! same bits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::icm::TraceEntry;
use crate::model::{Component, ModelParams};
use crate::registration::{FfdDeformation, SliceAffineSet, SliceMode, SliceStack, TransformState};
use crate::volume::{LabelVolume, Lattice, VoxelGrid};

pub const HEADER_EXT: &str = "vhdr";
pub const RAW_EXT: &str = "vraw";

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

/// A TOML error located by line in `text`.
pub fn toml_error(e: &toml::de::Error, text: &str, src: &str) -> Error {
    let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    parse_err(src, line, e.message().trim())
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn split_kv(l: &str) -> Option<(&str, &str)> {
    let (k, v) = l.split_once('=')?;
    Some((k.trim(), v.trim()))
}

fn nums<T: std::str::FromStr>(s: &str, src: &str, line: usize) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|w| w.parse().map_err(|_| parse_err(src, line, format!("bad number `{w}`"))))
        .collect()
}

fn triple<T: std::str::FromStr + Copy>(s: &str, src: &str, line: usize) -> Result<[T; 3]> {
    let v: Vec<T> = nums(s, src, line)?;
    v.try_into().map_err(|_| parse_err(src, line, "expected three values"))
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Payload path belonging to a header path.
pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension(RAW_EXT)
}

/// Header text for a lattice; `data` names the payload file.
fn volume_header(l: &Lattice, data: &str) -> String {
    format!(
        "dims = {}\nspacing = {}\norigin = {}\ndtype = f32le\ndata = {data}\n",
        l.dims.map(|d| d.to_string()).join(" "),
        join(&l.spacing),
        join(&l.origin)
    )
}

/// Writes `grid` as `<path>` (header) and the sibling `.vraw` payload.
/// Values are stored as f32.
pub fn write_volume(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let raw = raw_path(path);
    let name = raw.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut bytes = Vec::with_capacity(4 * grid.values.len());
    for &v in &grid.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    write_text(path, &volume_header(&grid.lattice, &name))
}

/// Parses a volume header into its lattice and payload file name.
pub fn parse_volume_header(text: &str, src: &str) -> Result<(Lattice, Option<String>)> {
    let (mut dims, mut spacing, mut origin, mut data) = (None, None, None, None);
    let mut last = 0;
    for (n, l) in content_lines(text) {
        last = n;
        let (k, v) = split_kv(l).ok_or_else(|| parse_err(src, n, "expected `key = value`"))?;
        match k {
            "dims" => dims = Some(triple::<usize>(v, src, n)?),
            "spacing" => spacing = Some(triple::<f64>(v, src, n)?),
            "origin" => origin = Some(triple::<f64>(v, src, n)?),
            "dtype" if v == "f32le" => {}
            "dtype" => return Err(parse_err(src, n, format!("unsupported dtype `{v}`"))),
            "data" => data = Some(v.to_string()),
            _ => return Err(parse_err(src, n, format!("unknown key `{k}`"))),
        }
    }
    let need = |o: Option<[f64; 3]>, key: &str| o.ok_or_else(|| parse_err(src, last, format!("missing `{key}`")));
    let dims = dims.ok_or_else(|| parse_err(src, last, "missing `dims`"))?;
    let lattice = Lattice::new(dims, need(spacing, "spacing")?, need(origin, "origin")?)
        .map_err(|e| parse_err(src, last, e.to_string()))?;
    Ok((lattice, data))
}

/// Reads a volume from its header path.
pub fn read_volume(path: &Path) -> Result<VoxelGrid> {
    let src = path.display().to_string();
    let (lattice, data) = parse_volume_header(&read_text(path)?, &src)?;
    let raw = match data {
        Some(name) => path.with_file_name(name),
        None => raw_path(path),
    };
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != 4 * lattice.len() {
        return Err(Error::Parse {
            source_name: raw.display().to_string(),
            line: 0,
            message: format!("payload has {} bytes, header needs {}", bytes.len(), 4 * lattice.len()),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    VoxelGrid::new(lattice, values)
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    write_volume(path, &labels.to_grid())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    LabelVolume::from_grid(&read_volume(path)?)
}

/// Model parameters as text:
///
/// ```text
/// labels = 0 1 2
/// sigma_floor = 1e-8 1e-8
/// [pi]
/// 0 = 0.5
/// [image 0 label 1 component 0]
/// tau = 1.0
/// mu = 25.0
/// sigma2 = 4.0
/// ```
pub fn params_to_text(p: &ModelParams) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "labels = {}", p.labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "));
    let _ = writeln!(s, "sigma_floor = {}", join(&p.sigma_floor));
    s.push_str("[pi]\n");
    for (k, pi) in p.labels.iter().zip(&p.pi) {
        let _ = writeln!(s, "{k} = {pi:?}");
    }
    for (i, per_label) in p.components.iter().enumerate() {
        for (k, comps) in per_label.iter().enumerate() {
            for (c, g) in comps.iter().enumerate() {
                let _ = writeln!(s, "[image {i} label {} component {c}]", p.labels[k]);
                let _ = writeln!(s, "tau = {:?}\nmu = {:?}\nsigma2 = {:?}", g.tau, g.mu, g.sigma2);
            }
        }
    }
    s
}

pub fn params_from_text(text: &str, src: &str) -> Result<ModelParams> {
    enum Sec {
        Top,
        Pi,
        Comp,
    }
    let mut labels: Option<Vec<u16>> = None;
    let mut floor: Option<Vec<f64>> = None;
    let mut pi: Vec<Option<f64>> = Vec::new();
    // (image, label index, component) -> [tau, mu, sigma2]
    let mut comps: Vec<((usize, usize, usize), [Option<f64>; 3], usize)> = Vec::new();
    let mut sec = Sec::Top;
    let mut last = 0;
    for (n, l) in content_lines(text) {
        last = n;
        if let Some(h) = l.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            let labels = labels.as_ref().ok_or_else(|| parse_err(src, n, "`labels` must come first"))?;
            let w: Vec<&str> = h.split_whitespace().collect();
            sec = match w.as_slice() {
                ["pi"] => Sec::Pi,
                ["image", i, "label", k, "component", c] => {
                    let num = |t: &str| t.parse::<usize>().map_err(|_| parse_err(src, n, format!("bad index `{t}`")));
                    let id: u16 = k.parse().map_err(|_| parse_err(src, n, format!("bad label `{k}`")))?;
                    let ki = labels
                        .iter()
                        .position(|&x| x == id)
                        .ok_or_else(|| parse_err(src, n, format!("label {id} not in `labels`")))?;
                    let key = (num(i)?, ki, num(c)?);
                    if comps.iter().any(|(k2, _, _)| *k2 == key) {
                        return Err(parse_err(src, n, "duplicate component section"));
                    }
                    comps.push((key, [None; 3], n));
                    Sec::Comp
                }
                _ => return Err(parse_err(src, n, format!("unknown section `{h}`"))),
            };
            continue;
        }
        let (k, v) = split_kv(l).ok_or_else(|| parse_err(src, n, "expected `key = value`"))?;
        match sec {
            Sec::Top => match k {
                "labels" => {
                    let ls: Vec<u16> = nums(v, src, n)?;
                    pi = vec![None; ls.len()];
                    labels = Some(ls);
                }
                "sigma_floor" => floor = Some(nums(v, src, n)?),
                _ => return Err(parse_err(src, n, format!("unknown key `{k}`"))),
            },
            Sec::Pi => {
                let ls = labels.as_ref().expect("checked at section start");
                let id: u16 = k.parse().map_err(|_| parse_err(src, n, format!("bad label `{k}`")))?;
                let ki = ls
                    .iter()
                    .position(|&x| x == id)
                    .ok_or_else(|| parse_err(src, n, format!("label {id} not in `labels`")))?;
                pi[ki] = Some(v.parse().map_err(|_| parse_err(src, n, format!("bad number `{v}`")))?);
            }
            Sec::Comp => {
                let slot = match k {
                    "tau" => 0,
                    "mu" => 1,
                    "sigma2" => 2,
                    _ => return Err(parse_err(src, n, format!("unknown key `{k}`"))),
                };
                let x: f64 = v.parse().map_err(|_| parse_err(src, n, format!("bad number `{v}`")))?;
                comps.last_mut().expect("inside a component section").1[slot] = Some(x);
            }
        }
    }
    let labels = labels.ok_or_else(|| parse_err(src, last, "missing `labels`"))?;
    let sigma_floor = floor.ok_or_else(|| parse_err(src, last, "missing `sigma_floor`"))?;
    let pi = pi
        .into_iter()
        .enumerate()
        .map(|(k, v)| v.ok_or_else(|| parse_err(src, last, format!("missing pi for label {}", labels[k]))))
        .collect::<Result<Vec<_>>>()?;
    let n_images = sigma_floor.len();
    let mut components = vec![vec![Vec::<Component>::new(); labels.len()]; n_images];
    for ((i, k, c), vals, n) in comps {
        if i >= n_images {
            return Err(parse_err(src, n, format!("image {i} beyond the {n_images} sigma floors")));
        }
        let list = &mut components[i][k];
        if c != list.len() {
            return Err(parse_err(src, n, "components must be listed in order from 0"));
        }
        let get = |j: usize, name: &str| vals[j].ok_or_else(|| parse_err(src, n, format!("missing `{name}`")));
        list.push(Component {
            tau: get(0, "tau")?,
            mu: get(1, "mu")?,
            sigma2: get(2, "sigma2")?,
        });
    }
    let p = ModelParams {
        labels,
        pi,
        components,
        sigma_floor,
    };
    p.validate().map_err(|e| parse_err(src, last, e.to_string()))?;
    Ok(p)
}

pub fn write_params(path: &Path, p: &ModelParams) -> Result<()> {
    write_text(path, &params_to_text(p))
}

pub fn read_params(path: &Path) -> Result<ModelParams> {
    params_from_text(&read_text(path)?, &path.display().to_string())
}

/// FFD block: a `[ffd]` header line, lattice keys, then one `phi` line per
/// control point.
pub fn ffd_to_text(name: &str, f: &FfdDeformation) -> String {
    let mut s = format!(
        "[{name}]\ndims = {}\nspacing = {}\norigin = {}\n",
        f.dims.map(|d| d.to_string()).join(" "),
        join(&f.spacing),
        join(&f.origin)
    );
    for (j, d) in f.phi.iter().enumerate() {
        let _ = writeln!(s, "phi {j} {}", join(d));
    }
    s
}

/// Parses the body of an FFD block (the lines after its header).
fn ffd_from_lines(lines: &[(usize, &str)], src: &str, header_line: usize) -> Result<FfdDeformation> {
    let (mut dims, mut spacing, mut origin) = (None, None, None);
    let mut phi = Vec::new();
    for &(n, l) in lines {
        if let Some(rest) = l.strip_prefix("phi ") {
            let v: Vec<f64> = nums(rest, src, n)?;
            if v.len() != 4 || v[0] != phi.len() as f64 {
                return Err(parse_err(src, n, format!("expected `phi {} dx dy dz`", phi.len())));
            }
            phi.push([v[1], v[2], v[3]]);
            continue;
        }
        let (k, v) = split_kv(l).ok_or_else(|| parse_err(src, n, "expected `key = value` or `phi` line"))?;
        match k {
            "dims" => dims = Some(triple::<usize>(v, src, n)?),
            "spacing" => spacing = Some(triple::<f64>(v, src, n)?),
            "origin" => origin = Some(triple::<f64>(v, src, n)?),
            _ => return Err(parse_err(src, n, format!("unknown key `{k}`"))),
        }
    }
    let (Some(dims), Some(spacing), Some(origin)) = (dims, spacing, origin) else {
        return Err(parse_err(src, header_line, "FFD block needs dims, spacing and origin"));
    };
    let mut f = FfdDeformation::new(dims, spacing, origin).map_err(|e| parse_err(src, header_line, e.to_string()))?;
    if phi.len() != f.n_control() {
        return Err(parse_err(
            src,
            header_line,
            format!("FFD block lists {} control points, lattice has {}", phi.len(), f.n_control()),
        ));
    }
    f.phi = phi;
    Ok(f)
}

/// Transform state as text:
///
/// ```text
/// mode = rigid
/// stack 0 center 64.0 64.0 z 2.5 5.0 n 20
/// 0 0 0.0 0.0 0.0
/// [ffd]
/// dims = 7 7 6
/// ...
/// ```
///
/// Each slice line is `image slice` followed by that slice's parameters
/// (`tx ty theta` for rigid slices).
pub fn transforms_to_text(t: &TransformState) -> String {
    let mode = match t.slices.mode {
        SliceMode::Rigid => "rigid",
        SliceMode::Affine => "affine",
    };
    let names: Vec<&str> = (0..t.slices.mode.n_params()).map(|j| t.slices.mode.param_name(j)).collect();
    let mut s = format!("mode = {mode}\n# image slice {}\n", names.join(" "));
    for (i, st) in t.slices.stacks.iter().enumerate() {
        let _ = writeln!(
            s,
            "stack {i} center {} z {:?} {:?} n {}",
            join(&st.center),
            st.z_origin,
            st.z_spacing,
            st.n_slices
        );
        for (k, p) in st.params.iter().enumerate() {
            let _ = writeln!(s, "{i} {k} {}", join(p));
        }
    }
    s + &ffd_to_text("ffd", &t.ffd)
}

pub fn transforms_from_text(text: &str, src: &str) -> Result<TransformState> {
    let lines: Vec<(usize, &str)> = content_lines(text).collect();
    let ffd_at = lines.iter().position(|(_, l)| *l == "[ffd]");
    let (head, ffd_lines) = match ffd_at {
        Some(p) => (&lines[..p], &lines[p + 1..]),
        None => return Err(parse_err(src, lines.last().map_or(0, |l| l.0), "missing `[ffd]` block")),
    };
    let mut mode = None;
    let mut stacks: Vec<SliceStack> = Vec::new();
    for &(n, l) in head {
        if let Some((k, v)) = split_kv(l) {
            if k != "mode" {
                return Err(parse_err(src, n, format!("unknown key `{k}`")));
            }
            mode = Some(match v {
                "rigid" => SliceMode::Rigid,
                "affine" => SliceMode::Affine,
                _ => return Err(parse_err(src, n, format!("unknown slice mode `{v}`"))),
            });
            continue;
        }
        let mode = mode.ok_or_else(|| parse_err(src, n, "`mode` must come first"))?;
        let w: Vec<&str> = l.split_whitespace().collect();
        if w.first() == Some(&"stack") {
            let ok = w.len() == 10 && w[2] == "center" && w[5] == "z" && w[8] == "n";
            if !ok || w[1].parse::<usize>().ok() != Some(stacks.len()) {
                return Err(parse_err(
                    src,
                    n,
                    format!("expected `stack {} center cx cy z z0 dz n count`", stacks.len()),
                ));
            }
            let f = |t: &str| t.parse::<f64>().map_err(|_| parse_err(src, n, format!("bad number `{t}`")));
            let n_slices: usize = w[9].parse().map_err(|_| parse_err(src, n, "bad slice count"))?;
            stacks.push(SliceStack {
                center: [f(w[3])?, f(w[4])?],
                z_origin: f(w[6])?,
                z_spacing: f(w[7])?,
                n_slices,
                params: Vec::with_capacity(n_slices),
            });
            continue;
        }
        let img = stacks.len().checked_sub(1).ok_or_else(|| parse_err(src, n, "slice line before any `stack`"))?;
        let st = &mut stacks[img];
        let ok = w.len() == 2 + mode.n_params()
            && w[0].parse::<usize>().ok() == Some(img)
            && w[1].parse::<usize>().ok() == Some(st.params.len());
        if !ok {
            return Err(parse_err(
                src,
                n,
                format!("expected slice line `{img} {} <{} params>`", st.params.len(), mode.n_params()),
            ));
        }
        st.params.push(nums(&w[2..].join(" "), src, n)?);
    }
    let mode = mode.ok_or_else(|| parse_err(src, 1, "missing `mode`"))?;
    for (i, st) in stacks.iter().enumerate() {
        if st.params.len() != st.n_slices {
            return Err(parse_err(
                src,
                ffd_lines.first().map_or(0, |l| l.0),
                format!("stack {i} lists {} slices, expected {}", st.params.len(), st.n_slices),
            ));
        }
    }
    let header_line = lines[ffd_at.expect("checked")].0;
    Ok(TransformState {
        slices: SliceAffineSet { mode, stacks },
        ffd: ffd_from_lines(ffd_lines, src, header_line)?,
    })
}

pub fn write_transforms(path: &Path, t: &TransformState) -> Result<()> {
    write_text(path, &transforms_to_text(t))
}

pub fn read_transforms(path: &Path) -> Result<TransformState> {
    transforms_from_text(&read_text(path)?, &path.display().to_string())
}

/// Parses a standalone FFD block such as the one in a truth record.
pub fn ffd_from_text(text: &str, name: &str, src: &str) -> Result<FfdDeformation> {
    let lines: Vec<(usize, &str)> = content_lines(text).collect();
    let tag = format!("[{name}]");
    let start = lines
        .iter()
        .position(|(_, l)| *l == tag)
        .ok_or_else(|| parse_err(src, 0, format!("missing `{tag}` block")))?;
    let end = lines[start + 1..]
        .iter()
        .position(|(_, l)| l.starts_with('['))
        .map_or(lines.len(), |p| start + 1 + p);
    ffd_from_lines(&lines[start + 1..end], src, lines[start].0)
}

/// Two-column LL trace: running record number and value.
pub fn ll_trace_to_text(trace: &[TraceEntry]) -> String {
    let mut s = String::from("# iteration ll\n");
    for (j, e) in trace.iter().enumerate() {
        let _ = writeln!(s, "{j} {:?}", e.value);
    }
    s
}

/// Reads the values of a trace written by [`ll_trace_to_text`].
pub fn ll_trace_from_text(text: &str, src: &str) -> Result<Vec<f64>> {
    content_lines(text)
        .enumerate()
        .map(|(j, (n, l))| {
            let v: Vec<f64> = nums(l, src, n)?;
            if v.len() != 2 || v[0] != j as f64 {
                return Err(parse_err(src, n, format!("expected `{j} <ll>`")));
            }
            Ok(v[1])
        })
        .collect()
}
