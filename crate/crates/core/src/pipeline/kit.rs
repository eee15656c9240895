//! Built-in module kit.
//!
//! Real reconstruction algorithms are out of scope, so the kit ships small
//! deterministic stand-ins that give paths realistic shape: bank splitting,
//! payload calibration, synthetic CPU cost, provenance tagging and a
//! reconstruction stage that grows events to their processed target size.
//! Every module is a pure function of the event it receives, which is what
//! lets the distributed production layer reprocess events anywhere.

use std::time::{Duration, Instant};

use crate::event::{Bank, BankDescriptor, Event};
use rand::Rng;
use crate::generator::{
    self, event_rng, stream_seed, LITE_TRACK_BANK, RAW_BANK, RECO_BANK, SUMMARY_BANK,
};

use super::{Module, ModuleRegistry, ModuleStatus, PipelineError};

/// Registers the kit: `unpack`, `calib`, `burn`, `tag`, `reco`, `addbank`.
pub fn register_builtins(registry: &mut ModuleRegistry) -> Result<(), PipelineError> {
    registry.register("unpack", |spec| {
        Ok(Box::new(Unpack {
            source: spec.param("bank").unwrap_or(RAW_BANK).to_owned(),
        }) as Box<dyn Module>)
    })?;
    registry.register("calib", |spec| {
        Ok(Box::new(Calib {
            bank: spec.param("bank").unwrap_or(generator::CALOR_BANK).to_owned(),
            gain: spec.param_or("gain", 1.0f64)?,
        }) as Box<dyn Module>)
    })?;
    registry.register("burn", |spec| {
        Ok(Box::new(Burn {
            cost: Duration::from_secs_f64(spec.param_or("cost_ms", 1.0f64)?.max(0.0) / 1e3),
            spin: spec.param_or("spin", true)?,
        }) as Box<dyn Module>)
    })?;
    registry.register("tag", |spec| {
        Ok(Box::new(Tag {
            bank: spec.param("bank").unwrap_or("TAGB").to_owned(),
            label: spec.param("label").unwrap_or("tag").to_owned(),
        }) as Box<dyn Module>)
    })?;
    registry.register("reco", |spec| {
        Ok(Box::new(Reco {
            dst_target: spec.param_or("dst_kb", 60.0f64)? * 1024.0,
            lite_target: spec.param_or("mini_kb", 12.0f64)? * 1024.0,
            jitter: spec.param_or("jitter", 0.025f64)?,
        }) as Box<dyn Module>)
    })?;
    registry.register("addbank", |spec| {
        Ok(Box::new(AddBank {
            bank: spec.param("bank").unwrap_or("XTRA").to_owned(),
            width: spec.param_or("width", 4u16)?,
            records: spec.param_or("records", 1u32)?,
            fill: spec.param_or("fill", 0u8)?,
        }) as Box<dyn Module>)
    })?;
    Ok(())
}

/// Splits the raw readout bank into tracker and calorimeter halves.
///
/// The first half of the records becomes `TRK`, the rest `CAL`; the source
/// bank is removed. Events without the source bank pass through untouched.
struct Unpack {
    source: String,
}

impl Module for Unpack {
    fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
        let Some(raw) = event.take_bank(&self.source)? else {
            return Ok(ModuleStatus::Ok);
        };
        let width = raw.descriptor().record_width_bytes();
        let split = (raw.record_count() as usize).div_ceil(2) * width as usize;
        let (front, back) = raw.payload().split_at(split);
        event.put_bank(Bank::new(
            BankDescriptor::new(generator::TRACK_BANK, 1, width)?,
            front.to_vec(),
        )?)?;
        event.put_bank(Bank::new(
            BankDescriptor::new(generator::CALOR_BANK, 1, width)?,
            back.to_vec(),
        )?)?;
        Ok(ModuleStatus::Ok)
    }
}

/// Scales a bank's payload, read as little-endian `i32` lanes, by `gain`.
struct Calib {
    bank: String,
    gain: f64,
}

impl Module for Calib {
    fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
        let Some(bank) = event.bank(&self.bank) else {
            return Ok(ModuleStatus::Ok);
        };
        let descriptor = bank.descriptor().clone();
        let mut payload = bank.payload().to_vec();
        for lane in payload.chunks_exact_mut(4) {
            let v = i32::from_le_bytes(lane.try_into().unwrap());
            let scaled = (f64::from(v) * self.gain).round();
            let clamped = scaled.clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32;
            lane.copy_from_slice(&clamped.to_le_bytes());
        }
        event.replace_bank(Bank::new(descriptor, payload)?)?;
        Ok(ModuleStatus::Ok)
    }
}

/// Consumes a fixed per-event processing cost and leaves the event alone.
///
/// `spin=true` burns CPU; `spin=false` sleeps instead, modelling a fixed
/// service time that is independent of how loaded the host is.
struct Burn {
    cost: Duration,
    spin: bool,
}

impl Module for Burn {
    fn process(&mut self, _event: &mut Event) -> Result<ModuleStatus, PipelineError> {
        if self.spin {
            let start = Instant::now();
            while start.elapsed() < self.cost {
                std::hint::spin_loop();
            }
        } else {
            std::thread::sleep(self.cost);
        }
        Ok(ModuleStatus::Ok)
    }
}

/// Adds a one-record bank carrying a fixed label.
struct Tag {
    bank: String,
    label: String,
}

impl Module for Tag {
    fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
        let bytes = self.label.as_bytes().to_vec();
        let width = bytes.len().max(1) as u16;
        let payload = if bytes.is_empty() { vec![0] } else { bytes };
        event.put_bank(Bank::new(BankDescriptor::new(&self.bank, 1, width)?, payload)?)?;
        Ok(ModuleStatus::Ok)
    }
}

/// Reconstruction stand-in.
///
/// Adds a lite-track bank sized so that the compact keep-list output lands
/// on `mini_kb`, then pads the event with a reconstruction bank until the
/// whole record lands on `dst_kb`. All content is derived from the event
/// identity alone, so reprocessing the same event anywhere gives the same
/// bytes.
struct Reco {
    dst_target: f64,
    lite_target: f64,
    jitter: f64,
}

const LITE_RECORD_WIDTH: u16 = 48;
const RECO_RECORD_WIDTH: u16 = 32;

impl Module for Reco {
    fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
        // Reprocessing replaces earlier reconstruction output.
        event.take_bank(LITE_TRACK_BANK)?;
        event.take_bank(RECO_BANK)?;

        let mut rng = event_rng(
            stream_seed(u64::from(event.experiment()), "reco"),
            event.run(),
            event.event_number(),
        );
        let u_lite = 1.0 + self.jitter * (2.0 * rng.random::<f64>() - 1.0);
        let u_dst = 1.0 + self.jitter * (2.0 * rng.random::<f64>() - 1.0);

        // Compact output is record framing + summary bank + lite tracks.
        let summary_bytes = event
            .bank(SUMMARY_BANK)
            .map(|b| 14 + SUMMARY_BANK.len() + b.payload().len())
            .unwrap_or(0);
        let lite_fixed = 27 + summary_bytes + 14 + LITE_TRACK_BANK.len();
        let lite_records = ((self.lite_target * u_lite - lite_fixed as f64).max(0.0)
            / f64::from(LITE_RECORD_WIDTH)) as u32;
        event.put_bank(generator::random_bank(
            &mut rng,
            LITE_TRACK_BANK,
            LITE_RECORD_WIDTH,
            lite_records,
        )?)?;

        let current = crate::event::uncompressed_record_size(event);
        let reco_fixed = current + 14 + RECO_BANK.len();
        let reco_records = ((self.dst_target * u_dst - reco_fixed as f64).max(0.0)
            / f64::from(RECO_RECORD_WIDTH)) as u32;
        event.put_bank(generator::random_bank(
            &mut rng,
            RECO_BANK,
            RECO_RECORD_WIDTH,
            reco_records,
        )?)?;
        Ok(ModuleStatus::Ok)
    }
}

/// Adds a constant-filled bank; handy for composition tests and demos.
struct AddBank {
    bank: String,
    width: u16,
    records: u32,
    fill: u8,
}

impl Module for AddBank {
    fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
        let payload = vec![self.fill; self.width as usize * self.records as usize];
        event.put_bank(Bank::new(BankDescriptor::new(&self.bank, 1, self.width)?, payload)?)?;
        Ok(ModuleStatus::Ok)
    }
}

/// The standard reconstruction script used by production jobs.
pub fn standard_reconstruction_script() -> &'static str {
    "module unpack\nmodule calib gain=1.0\nmodule reco dst_kb=60 mini_kb=12\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::uncompressed_record_size;
    use crate::generator::{beam_event, GeneratorConfig};
    use crate::pipeline::{build_path, run_path};

    fn registry() -> ModuleRegistry {
        ModuleRegistry::with_builtins()
    }

    fn processed(script: &str, events: Vec<Event>) -> Vec<Event> {
        let r = registry();
        let path = build_path("t", script, &r).unwrap();
        let mut out = Vec::new();
        run_path(&path, &r, events.into_iter().map(Ok), |e| {
            out.push(e.clone());
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn unpack_splits_raw_into_trk_and_cal() {
        let cfg = GeneratorConfig::default();
        let raw = beam_event(&cfg, 5, 2, 1);
        let total = raw.bank(RAW_BANK).unwrap().record_count();
        let out = processed("module unpack", vec![raw]);
        let e = &out[0];
        assert!(e.bank(RAW_BANK).is_none());
        let trk = e.bank(generator::TRACK_BANK).unwrap().record_count();
        let cal = e.bank(generator::CALOR_BANK).unwrap().record_count();
        assert_eq!(trk + cal, total);
        assert!(trk == cal || trk == cal + 1);
    }

    #[test]
    fn calib_scales_i32_lanes() {
        let mut e = Event::new(1, 1, 1, Provenance::Beam);
        let payload: Vec<u8> = [10i32, -6, 1000]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        e.put_bank(Bank::new(BankDescriptor::new("CAL", 1, 4).unwrap(), payload).unwrap())
            .unwrap();
        e.seal();
        let out = processed("module calib gain=1.5", vec![e]);
        let bank = out[0].bank("CAL").unwrap();
        let values: Vec<i32> = bank
            .payload()
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(values, vec![15, -9, 1500]);
    }

    use crate::event::Provenance;

    #[test]
    fn tag_adds_label_bank() {
        let mut e = Event::new(1, 1, 1, Provenance::Beam);
        e.seal();
        let out = processed("module tag label=pass7", vec![e]);
        let bank = out[0].bank("TAGB").unwrap();
        assert_eq!(bank.payload(), b"pass7");
    }

    #[test]
    fn burn_consumes_requested_time() {
        let mut e = Event::new(1, 1, 1, Provenance::Beam);
        e.seal();
        let started = Instant::now();
        processed("module burn cost_ms=20 spin=false", vec![e]);
        assert!(started.elapsed() >= Duration::from_millis(20));
    }

    #[test]
    fn reco_is_deterministic_per_identity() {
        let cfg = GeneratorConfig::default();
        let raw = beam_event(&cfg, 5, 2, 9);
        let a = processed(standard_reconstruction_script(), vec![raw.clone()]);
        let b = processed(standard_reconstruction_script(), vec![raw]);
        assert_eq!(a, b);
    }

    #[test]
    fn standard_reconstruction_hits_dst_target() {
        let cfg = GeneratorConfig::default();
        let events: Vec<Event> = (1..=300).map(|i| beam_event(&cfg, 5, 2, i)).collect();
        let out = processed(standard_reconstruction_script(), events);
        let mean = out
            .iter()
            .map(|e| uncompressed_record_size(e) as f64)
            .sum::<f64>()
            / out.len() as f64;
        let target = 60.0 * 1024.0;
        assert!(
            (mean - target).abs() <= 0.05 * target,
            "mean dst size {mean:.0} vs {target:.0}"
        );
    }

    #[test]
    fn addbank_adds_requested_records() {
        let mut e = Event::new(1, 1, 1, Provenance::Beam);
        e.seal();
        let out = processed("module addbank bank=PADX width=8 records=3 fill=9", vec![e]);
        let bank = out[0].bank("PADX").unwrap();
        assert_eq!(bank.record_count(), 3);
        assert!(bank.payload().iter().all(|b| *b == 9));
    }
}
