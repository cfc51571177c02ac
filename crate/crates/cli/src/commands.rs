use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use mvmm_core::em::{hard_segmentation, native_segmentations};
use mvmm_core::icm::{run_icm, IcmState, Preset, ScheduleConfig};
use mvmm_core::io;
use mvmm_core::metrics::{acd, dice, mean_std};
use mvmm_core::phantom::{generate_phantom, AxisEnd, Phantom, PhantomSpec, LABELS};
use mvmm_core::volume::{LabelVolume, VoxelGrid};
use mvmm_core::{Error, Result};

use crate::config::{self, Loaded};

pub enum Status {
    Complete,
    /// Some rows or presets failed; the rest were produced.
    Partial,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn print_spec(small: bool, seed: u64) -> Result<Status> {
    let spec = if small {
        PhantomSpec::small(seed)
    } else {
        PhantomSpec {
            seed,
            ..PhantomSpec::default()
        }
    };
    print!("{}", spec.to_toml());
    Ok(Status::Complete)
}

pub fn phantom(spec_path: &Path, out: &Path) -> Result<Status> {
    let text = fs::read_to_string(spec_path).map_err(io_err(spec_path))?;
    let spec = PhantomSpec::from_toml_named(&text, &spec_path.display().to_string())?;
    if out.exists() && !out.is_dir() {
        return Err(Error::Config(format!("output {} is not a directory", out.display())));
    }
    let p = generate_phantom(&spec)?;
    create_dir(out)?;
    for (i, name) in p.names.iter().enumerate() {
        io::write_volume(&out.join(format!("{name}.vhdr")), &p.images.images[i])?;
        io::write_labels(&out.join(format!("truth_{name}.vhdr")), &p.truth.native_labels[i])?;
    }
    io::write_labels(&out.join("truth_labels.vhdr"), &p.truth.labels)?;
    for (k, map) in p.atlas.maps.iter().enumerate() {
        io::write_volume(&out.join(format!("atlas_{}.vhdr", LABELS[k])), map)?;
    }
    write(&out.join("truth_transforms.txt"), &truth_record(&p))?;
    write(&out.join("coverage.txt"), &coverage_manifest(&p))?;
    write(&out.join("spec.toml"), &spec.to_toml())?;
    write(&out.join("config.toml"), &phantom_config(&p, spec.seed))?;
    Ok(Status::Complete)
}

/// Injected slice shifts and atlas deformation. A shift `(tx, ty)` moved the
/// slice content by `+t`, so the correcting slice parameters are `(-tx, -ty, 0)`.
pub fn truth_record(p: &Phantom) -> String {
    let mut s = String::from("# shift image slice tx ty\n");
    for sh in &p.truth.shifts {
        let _ = writeln!(s, "shift {} {} {:?} {:?}", sh.image, sh.slice, sh.tx, sh.ty);
    }
    if let Some(f) = &p.truth.atlas_ffd {
        s.push_str("# the stored atlas is clean(D(x)) for this deformation D\n");
        s += &io::ffd_to_text("atlas_ffd", f);
    }
    s
}

/// Per-image hull boxes and the crops that produced them.
pub fn coverage_manifest(p: &Phantom) -> String {
    let mut s = String::from("# image index name dims hull_lo hull_hi (mm)\n");
    for (i, g) in p.images.images.iter().enumerate() {
        let (lo, hi) = g.lattice.bounds();
        let d = g.lattice.dims;
        let _ = writeln!(
            s,
            "image {i} {} dims {} {} {} lo {:?} {:?} {:?} hi {:?} {:?} {:?}",
            p.names[i], d[0], d[1], d[2], lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]
        );
    }
    for t in &p.truth.truncations {
        let end = match t.end {
            AxisEnd::Low => "low",
            AxisEnd::High => "high",
        };
        let _ = writeln!(
            s,
            "truncation {} axis {} end {end} removed_voxels {} removed_mm {:?}",
            t.image, t.axis, t.removed_voxels, t.removed_mm
        );
    }
    s
}

fn phantom_config(p: &Phantom, seed: u64) -> String {
    let quote = |v: Vec<String>| v.iter().map(|n| format!("\"{n}\"")).collect::<Vec<_>>().join(", ");
    let images = quote(p.names.iter().map(|n| format!("{n}.vhdr")).collect());
    let atlas = quote(LABELS.iter().map(|k| format!("atlas_{k}.vhdr")).collect());
    let rows = vec!["[2, 2, 1]"; p.names.len()].join(", ");
    format!(
        "images = [{images}]\natlas = [{atlas}]\ndomain = \"truth_labels.vhdr\"\ntruth = \"truth_labels.vhdr\"\n\
         output = \"out\"\nseed = {seed}\n\n[labels]\nids = [{}]\ncomponents = [{rows}]\n\n[schedule]\npreset = \"mvmm-full\"\n",
        LABELS.map(|k| k.to_string()).join(", ")
    )
}

fn write_run(l: &Loaded, st: &IcmState, dir: &Path, started: Instant) -> Result<()> {
    let labels = &l.problem.config.labels;
    let common = &l.problem.images.common;
    let seg = hard_segmentation(&st.posteriors, labels, common)?;
    create_dir(dir)?;
    io::write_labels(&dir.join("seg_common.vhdr"), &seg)?;
    let native = native_segmentations(&seg, &l.problem.images, &st.transforms.slices)?;
    for (name, s) in l.names.iter().zip(&native) {
        io::write_labels(&dir.join(format!("seg_{name}.vhdr")), s)?;
    }
    if l.config.write_posteriors {
        for (k, id) in labels.iter().enumerate() {
            let values = (0..common.len())
                .map(|x| if st.posteriors.is_included(x) { st.posteriors.label(x, k) } else { 0.0 })
                .collect();
            io::write_volume(&dir.join(format!("posterior_{id}.vhdr")), &VoxelGrid::new(common.clone(), values)?)?;
        }
    }
    io::write_params(&dir.join("params.txt"), &st.params)?;
    io::write_transforms(&dir.join("transforms.txt"), &st.transforms)?;
    write(&dir.join("ll_trace.txt"), &io::ll_trace_to_text(&st.ll_trace))?;
    let mut log = format!("CONFIG path={} seed={}\n", l.source.display(), l.config.seed);
    for line in &st.log {
        log.push_str(line);
        log.push('\n');
    }
    let _ = writeln!(log, "WALL seconds={:.3}", started.elapsed().as_secs_f64());
    write(&dir.join("run.log"), &log)
}

pub fn segment(config_path: &Path) -> Result<Status> {
    let l = config::load(config_path)?;
    let started = Instant::now();
    let st = run_icm(&l.problem, &l.schedule)?;
    write_run(&l, &st, &l.config.output, started)?;
    Ok(Status::Complete)
}

/// One scored (case, label) pair.
struct Row {
    case: usize,
    label: u16,
    dice: f64,
    acd: std::result::Result<f64, String>,
}

fn score(seg: &LabelVolume, truth: &LabelVolume, case: usize, labels: &[u16]) -> Result<Vec<Row>> {
    labels
        .iter()
        .map(|&k| {
            Ok(Row {
                case,
                label: k,
                dice: dice(seg, truth, k)?,
                acd: acd(seg, truth, k).map_err(|e| e.to_string()),
            })
        })
        .collect()
}

fn metric_table(rows: &[Row], labels: &[u16]) -> String {
    let mut s = String::from("case\tlabel\tdice\tacd\n");
    for r in rows {
        let acd = match &r.acd {
            Ok(v) => format!("{v:.6}"),
            Err(e) => format!("ERROR {e}"),
        };
        let _ = writeln!(s, "{}\t{}\t{:.6}\t{acd}", r.case, r.label, r.dice);
    }
    s.push_str("\nlabel\tn\tdice_mean\tdice_std\tacd_mean\tacd_std\n");
    for &k in labels {
        let ok: Vec<&Row> = rows.iter().filter(|r| r.label == k && r.acd.is_ok()).collect();
        let (dm, ds) = mean_std(&ok.iter().map(|r| r.dice).collect::<Vec<_>>());
        let (am, asd) = mean_std(&ok.iter().map(|r| *r.acd.as_ref().unwrap()).collect::<Vec<_>>());
        let _ = writeln!(s, "{k}\t{}\t{dm:.6}\t{ds:.6}\t{am:.6}\t{asd:.6}", ok.len());
    }
    s
}

pub fn evaluate(segs: &[std::path::PathBuf], truths: &[std::path::PathBuf], labels: &[u16], out: Option<&Path>) -> Result<Status> {
    if segs.len() != truths.len() {
        return Err(Error::Config(format!(
            "{} segmentations but {} references",
            segs.len(),
            truths.len()
        )));
    }
    let mut pairs = Vec::new();
    for (s, t) in segs.iter().zip(truths) {
        let (a, b) = (io::read_labels(s)?, io::read_labels(t)?);
        if a.lattice != b.lattice {
            return Err(Error::Evaluation(format!(
                "{} and {} are on different lattices",
                s.display(),
                t.display()
            )));
        }
        pairs.push((a, b));
    }
    let mut rows = Vec::new();
    for (case, (a, b)) in pairs.iter().enumerate() {
        rows.extend(score(a, b, case, labels)?);
    }
    let table = metric_table(&rows, labels);
    print!("{table}");
    if let Some(p) = out {
        write(p, &table)?;
    }
    Ok(if rows.iter().all(|r| r.acd.is_ok()) { Status::Complete } else { Status::Partial })
}

pub fn ablate(config_path: &Path) -> Result<Status> {
    let l = config::load(config_path)?;
    let truth = l
        .truth
        .as_ref()
        .ok_or_else(|| Error::Config("ablation needs a `truth` label volume in the config".into()))?;
    let labels = l.config.eval_labels();
    let schedules = Preset::ALL
        .iter()
        .map(|&p| {
            ScheduleConfig {
                preset: Some(p),
                enable_sc: None,
                enable_ffd: None,
                ..l.config.schedule.clone()
            }
            .resolve()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = String::from("preset\tlabel\tdice\tacd\tll\n");
    let mut failed = false;
    for (p, sched) in Preset::ALL.iter().zip(&schedules) {
        let started = Instant::now();
        let run = run_icm(&l.problem, sched).and_then(|st| {
            let seg = hard_segmentation(&st.posteriors, &l.problem.config.labels, &l.problem.images.common)?;
            write_run(&l, &st, &l.config.output.join(p.name()), started)?;
            Ok((seg, st.log_likelihood()))
        });
        match run {
            Ok((seg, ll)) => {
                for r in score(&seg, truth, 0, &labels)? {
                    let acd = r.acd.map_or_else(|e| format!("ERROR {e}"), |v| format!("{v:.6}"));
                    let _ = writeln!(table, "{}\t{}\t{:.6}\t{acd}\t{ll:.6}", p.name(), r.label, r.dice);
                }
            }
            Err(e) => {
                failed = true;
                for k in &labels {
                    let _ = writeln!(table, "{}\t{k}\tERROR {e}", p.name());
                }
            }
        }
    }
    print!("{table}");
    create_dir(&l.config.output)?;
    write(&l.config.output.join("ablation.txt"), &table)?;
    Ok(if failed { Status::Partial } else { Status::Complete })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_sample_deviation() {
        let rows: Vec<Row> = [0.6, 0.7, 0.8]
            .iter()
            .enumerate()
            .map(|(c, &d)| Row {
                case: c,
                label: 1,
                dice: d,
                acd: Ok(1.0),
            })
            .collect();
        let t = metric_table(&rows, &[1]);
        let last = t.lines().last().unwrap();
        assert_eq!(last, "1\t3\t0.700000\t0.100000\t1.000000\t0.000000");
    }
}
