//! The experiment runner: proxy-encode at every quantization level, run the
//! in-loop filter, assemble RD curves, and report Bjøntegaard deltas of the
//! enhanced run against the unfiltered anchor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bd::{bd_psnr, bd_rate, write_rd_csv, RdPoint};
use crate::codec::{proxy_encode, ProxyCodecConfig};
use crate::error::{MifError, Result};
use crate::filters::{decisions_to_csv, enhance_sequence, refs_to_csv, FilterModels, Mode, ModeDecision};
use crate::frame::{read_yuv_sequence, Frame, FrameRole};
use crate::metrics::psnr_luma;
use crate::partition::rasterize_partition;
use crate::rfs::{RfsConfig, RfsNet};
use crate::training::{bundle::expect_kind, ModelBundle};
use crate::validation;
use crate::{IfNet, MifNet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub raw: PathBuf,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u32,
}

fn default_bit_depth() -> u32 {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelPaths {
    pub mif: PathBuf,
    #[serde(rename = "if")]
    pub single: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub sequences: Vec<SequenceSpec>,
    pub qps: Vec<i32>,
    /// Model bundle paths per QP (keys are the QP values as strings in JSON).
    pub models: BTreeMap<i32, ModelPaths>,
    pub rfs_model: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_gop")]
    pub gop_size: usize,
    #[serde(default = "default_offsets")]
    pub qp_offsets: Vec<i32>,
    #[serde(default)]
    pub rfs: RfsManifestConfig,
}

fn default_gop() -> usize {
    4
}

fn default_offsets() -> Vec<i32> {
    vec![0, 4, 3, 4]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfsManifestConfig {
    pub pool_size: usize,
    pub cc_threshold: f64,
    pub num_selected: usize,
}

impl Default for RfsManifestConfig {
    fn default() -> Self {
        let d = RfsConfig::default();
        RfsManifestConfig {
            pool_size: d.pool_size,
            cc_threshold: d.cc_threshold,
            num_selected: d.num_selected,
        }
    }
}

impl ExperimentManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
        let manifest: ExperimentManifest = serde_json::from_str(&text)
            .map_err(|e| MifError::Format(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(validation!("experiment needs at least one sequence"));
        }
        if self.qps.len() < 4 {
            return Err(validation!("rate-distortion curves need at least 4 QPs"));
        }
        for seq in &self.sequences {
            if !seq.raw.exists() {
                return Err(validation!("missing sequence file {}", seq.raw.display()));
            }
        }
        for qp in &self.qps {
            let paths = self
                .models
                .get(qp)
                .ok_or_else(|| validation!("no model bundle listed for QP {qp}"))?;
            for p in [&paths.mif, &paths.single] {
                if !p.exists() {
                    return Err(validation!("missing model bundle {}", p.display()));
                }
            }
        }
        if !self.rfs_model.exists() {
            return Err(validation!("missing ranking model {}", self.rfs_model.display()));
        }
        Ok(())
    }

    fn rfs_config(&self) -> RfsConfig {
        RfsConfig {
            pool_size: self.rfs.pool_size,
            cc_threshold: self.rfs.cc_threshold,
            num_selected: self.rfs.num_selected,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub qp: i32,
    pub bitrate: f64,
    pub psnr_anchor: f64,
    pub psnr_enhanced: f64,
    pub decisions: Vec<ModeDecision>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub per_qp: Vec<QpResult>,
    pub bd_rate_percent: f64,
    pub bd_psnr_db: f64,
}

impl ExperimentReport {
    pub fn mode_count(&self, mode: Mode) -> usize {
        self.per_qp
            .iter()
            .flat_map(|q| q.decisions.iter())
            .filter(|d| d.mode == mode)
            .count()
    }
}

fn load_models(manifest: &ExperimentManifest, qp: i32) -> Result<FilterModels> {
    let paths = &manifest.models[&qp];
    let mif_bundle = ModelBundle::load(&paths.mif)?;
    expect_kind(&mif_bundle, "mif")?;
    let if_bundle = ModelBundle::load(&paths.single)?;
    expect_kind(&if_bundle, "if")?;
    let rfs_bundle = ModelBundle::load(&manifest.rfs_model)?;
    expect_kind(&rfs_bundle, "rfs")?;
    let m = mif_bundle.manifest.m.max(1);
    Ok(FilterModels {
        mif: MifNet::from_params(m, mif_bundle.params)?,
        single: IfNet::from_params(if_bundle.params)?,
        rfs: RfsNet::from_params(rfs_bundle.params.cast())?,
        rfs_config: RfsConfig { num_selected: m, ..manifest.rfs_config() },
    })
}

/// Runs the full evaluation described by the manifest and writes the report
/// files into `output_dir`. Deterministic for a fixed manifest.
pub fn run_experiment(manifest: &ExperimentManifest) -> Result<ExperimentReport> {
    manifest.validate()?;
    std::fs::create_dir_all(&manifest.output_dir)
        .map_err(|e| MifError::io(&manifest.output_dir, e))?;

    let mut raws_all: Vec<Vec<Frame>> = Vec::new();
    for seq in &manifest.sequences {
        raws_all.push(read_yuv_sequence(
            &seq.raw,
            seq.width,
            seq.height,
            seq.bit_depth,
            FrameRole::Raw,
        )?);
    }

    let mut per_qp = Vec::new();
    for &qp in &manifest.qps {
        let models = load_models(manifest, qp)?;
        let mut bitrate_acc = 0.0;
        let mut anchor_acc = 0.0;
        let mut enhanced_acc = 0.0;
        let mut frame_count = 0usize;
        let mut decisions_all: Vec<ModeDecision> = Vec::new();

        for raws in &raws_all {
            let codec = ProxyCodecConfig {
                qp_base: qp,
                gop_size: manifest.gop_size,
                qp_offsets: manifest.qp_offsets.clone(),
                seed: manifest.seed,
            };
            let coded = proxy_encode(raws, &codec)?;
            bitrate_acc += coded.bitrate_estimate;

            let maps = coded
                .layouts
                .iter()
                .zip(&coded.urfs)
                .map(|(l, f)| {
                    let (h, w) = f.dim();
                    rasterize_partition(l, w, h)
                })
                .collect::<Result<Vec<_>>>()?;

            // The anchor consumes the same reconstructions unfiltered; the
            // rate proxy is untouched by filtering.
            for (u, r) in coded.urfs.iter().zip(raws) {
                anchor_acc += psnr_luma(u, r)?;
            }
            let (enhanced, decisions) = enhance_sequence(&coded.urfs, &maps, raws, &models)?;
            for (e, r) in enhanced.iter().zip(raws) {
                enhanced_acc += psnr_luma(e, r)?;
            }
            frame_count += raws.len();
            decisions_all.extend(decisions);
        }

        let n_seq = manifest.sequences.len() as f64;
        per_qp.push(QpResult {
            qp,
            bitrate: bitrate_acc / n_seq,
            psnr_anchor: anchor_acc / frame_count as f64,
            psnr_enhanced: enhanced_acc / frame_count as f64,
            decisions: decisions_all,
        });
    }

    per_qp.sort_by(|a, b| a.bitrate.partial_cmp(&b.bitrate).unwrap());
    let anchor_curve: Vec<RdPoint> =
        per_qp.iter().map(|q| RdPoint::new(q.bitrate, q.psnr_anchor)).collect();
    let test_curve: Vec<RdPoint> =
        per_qp.iter().map(|q| RdPoint::new(q.bitrate, q.psnr_enhanced)).collect();
    let (bd_rate_percent, bd_psnr_db) = if anchor_curve == test_curve {
        (0.0, 0.0)
    } else {
        (bd_rate(&anchor_curve, &test_curve)?, bd_psnr(&anchor_curve, &test_curve)?)
    };

    let report = ExperimentReport { per_qp, bd_rate_percent, bd_psnr_db };
    write_report_files(manifest, &report, &anchor_curve, &test_curve)?;
    Ok(report)
}

fn write_report_files(
    manifest: &ExperimentManifest,
    report: &ExperimentReport,
    anchor: &[RdPoint],
    test: &[RdPoint],
) -> Result<()> {
    let dir = &manifest.output_dir;
    write_rd_csv(
        dir.join("rd_curves.csv"),
        &[("anchor".to_string(), anchor.to_vec()), ("enhanced".to_string(), test.to_vec())],
    )?;

    let mut summary = String::from("qp,bitrate,psnr_anchor,psnr_enhanced\n");
    for q in &report.per_qp {
        summary.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            q.qp, q.bitrate, q.psnr_anchor, q.psnr_enhanced
        ));
    }
    std::fs::write(dir.join("qp_summary.csv"), summary).map_err(|e| MifError::io(dir, e))?;

    let bd = format!(
        "metric,value\nbd_rate_percent,{:.6}\nbd_psnr_db,{:.6}\n",
        report.bd_rate_percent, report.bd_psnr_db
    );
    std::fs::write(dir.join("bd_summary.csv"), bd).map_err(|e| MifError::io(dir, e))?;

    for q in &report.per_qp {
        std::fs::write(dir.join(format!("decisions_qp{}.csv", q.qp)), decisions_to_csv(&q.decisions))
            .map_err(|e| MifError::io(dir, e))?;
        std::fs::write(dir.join(format!("references_qp{}.csv", q.qp)), refs_to_csv(&q.decisions))
            .map_err(|e| MifError::io(dir, e))?;
    }

    let mut text = String::new();
    text.push_str("in-loop filter evaluation (proxy rate units)\n");
    text.push_str(&format!("sequences: {}\n", manifest.sequences.len()));
    for q in &report.per_qp {
        let mif = q.decisions.iter().filter(|d| d.mode == Mode::Mif).count();
        let single = q.decisions.iter().filter(|d| d.mode == Mode::If).count();
        let pass = q.decisions.iter().filter(|d| d.mode == Mode::Passthrough).count();
        text.push_str(&format!(
            "qp {:>2}: rate {:>12.2}  anchor {:>8.4} dB  enhanced {:>8.4} dB  modes MIF/IF/PASS {}/{}/{}\n",
            q.qp, q.bitrate, q.psnr_anchor, q.psnr_enhanced, mif, single, pass
        ));
    }
    text.push_str(&format!(
        "bd-rate {:+.4}% (negative saves rate)  bd-psnr {:+.4} dB\n",
        report.bd_rate_percent, report.bd_psnr_db
    ));
    std::fs::write(dir.join("report.txt"), text).map_err(|e| MifError::io(dir, e))?;
    Ok(())
}
