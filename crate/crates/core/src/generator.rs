//! Seeded synthetic event generator and the bank conventions it ships.
//!
//! Real detector readout and simulation are out of scope; this module stands
//! in for both. It produces events whose serialized size, summary fields and
//! background occupancy are tunable, so every downstream stage has realistic
//! cargo to chew on.
//!
//! Conventions baked into the synthetic data:
//!
//! - `EVTH` — summary bank, one record per named integer field, record layout
//!   `field_id u32 | value i32`. Skim predicates evaluate against it.
//! - `VTXP` — vertex bank, one record of three `f64` (x, y, z).
//! - `BGHT`, `BGEC` — background hit banks; their record counts per event are
//!   what the run-conditions derivation and the overlay step care about.
//! - `RAWD` — bulk readout filler sized to hit the configured target.
//!
//! All randomness is drawn from per-event streams derived from a seed, a run
//! and an event number, so regenerating any event in isolation reproduces the
//! same bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::event::{
    Bank, BankDescriptor, Event, EventError, EventFileHeader, EventFileWriter, FileType,
    Provenance,
};

pub const SUMMARY_BANK: &str = "EVTH";
pub const VERTEX_BANK: &str = "VTXP";
pub const RAW_BANK: &str = "RAWD";
pub const TRACK_BANK: &str = "TRK";
pub const CALOR_BANK: &str = "CAL";
pub const LITE_TRACK_BANK: &str = "TRKL";
pub const RECO_BANK: &str = "RECO";
pub const GEN_BANK: &str = "GENP";

/// Banks treated as beam-background payload by harvesting and overlay.
pub const BACKGROUND_BANKS: [&str; 2] = ["BGHT", "BGEC"];

/// Named integer fields of the summary bank, in field-id order.
pub const SUMMARY_FIELDS: [&str; 5] = ["ntrk", "ncls", "nneu", "esum", "ntrig"];

pub const SUMMARY_RECORD_WIDTH: u16 = 8;
pub const VERTEX_RECORD_WIDTH: u16 = 24;
pub const RAW_RECORD_WIDTH: u16 = 64;
pub const BGHT_RECORD_WIDTH: u16 = 16;
pub const BGEC_RECORD_WIDTH: u16 = 12;

/// Field id of a summary field name.
pub fn field_id(name: &str) -> Option<u32> {
    SUMMARY_FIELDS.iter().position(|f| *f == name).map(|i| i as u32)
}

/// Derives a named sub-stream seed from a master seed.
pub fn stream_seed(master: u64, name: &str) -> u64 {
    let mut h = splitmix(master ^ 0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    h
}

/// Derives the per-event seed for (stream, run, event number).
pub fn event_seed(stream: u64, run: u32, event_number: u64) -> u64 {
    splitmix(splitmix(stream ^ u64::from(run)) ^ event_number)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-event random stream.
pub fn event_rng(stream: u64, run: u32, event_number: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(event_seed(stream, run, event_number))
}

/// Knuth's Poisson sampler; fine for the small rates used here.
pub fn poisson(rng: &mut ChaCha12Rng, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let floor = (-lambda).exp();
    let mut k = 0u32;
    let mut p = 1.0f64;
    loop {
        p *= rng.random::<f64>();
        if p <= floor {
            return k;
        }
        k += 1;
    }
}

/// Builds a summary bank from (field id, value) pairs.
pub fn encode_summary(fields: &[(u32, i32)]) -> Bank {
    let mut payload = Vec::with_capacity(fields.len() * SUMMARY_RECORD_WIDTH as usize);
    for (id, value) in fields {
        payload.extend_from_slice(&id.to_le_bytes());
        payload.extend_from_slice(&value.to_le_bytes());
    }
    Bank::new(
        BankDescriptor::new(SUMMARY_BANK, 1, SUMMARY_RECORD_WIDTH).expect("static descriptor"),
        payload,
    )
    .expect("whole records by construction")
}

/// Decodes a summary bank back into (field id, value) pairs.
pub fn decode_summary(bank: &Bank) -> Vec<(u32, i32)> {
    let mut out = Vec::with_capacity(bank.record_count() as usize);
    for i in 0..bank.record_count() {
        let rec = bank.record(i).expect("index in range");
        let id = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let value = i32::from_le_bytes(rec[4..8].try_into().unwrap());
        out.push((id, value));
    }
    out
}

/// Looks a named field up in an event's summary bank.
pub fn summary_field(event: &Event, name: &str) -> Option<i32> {
    let id = field_id(name)?;
    let bank = event.bank(SUMMARY_BANK)?;
    decode_summary(bank)
        .into_iter()
        .find(|(fid, _)| *fid == id)
        .map(|(_, v)| v)
}

/// Builds a vertex bank with a single (x, y, z) record.
pub fn encode_vertex(x: f64, y: f64, z: f64) -> Bank {
    let mut payload = Vec::with_capacity(24);
    payload.extend_from_slice(&x.to_le_bytes());
    payload.extend_from_slice(&y.to_le_bytes());
    payload.extend_from_slice(&z.to_le_bytes());
    Bank::new(
        BankDescriptor::new(VERTEX_BANK, 1, VERTEX_RECORD_WIDTH).expect("static descriptor"),
        payload,
    )
    .expect("whole records by construction")
}

/// Reads the (x, y, z) record of a vertex bank.
pub fn decode_vertex(bank: &Bank) -> Option<[f64; 3]> {
    let rec = bank.record(0)?;
    Some([
        f64::from_le_bytes(rec[0..8].try_into().unwrap()),
        f64::from_le_bytes(rec[8..16].try_into().unwrap()),
        f64::from_le_bytes(rec[16..24].try_into().unwrap()),
    ])
}

/// Bank of `records` random fixed-width records.
pub fn random_bank(
    rng: &mut ChaCha12Rng,
    name: &str,
    width: u16,
    records: u32,
) -> Result<Bank, EventError> {
    let mut payload = vec![0u8; width as usize * records as usize];
    rng.fill(payload.as_mut_slice());
    Bank::new(BankDescriptor::new(name, 1, width)?, payload)
}

/// Tunables for synthetic beam data.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub experiment: u32,
    /// Target mean serialized size of one raw event, in bytes.
    pub raw_target_bytes: usize,
    /// Half-width of the uniform per-event size jitter (fraction of target).
    pub size_jitter: f64,
    /// Mean background records per event, summed over the background banks.
    pub background_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            experiment: 1,
            raw_target_bytes: 35 * 1024,
            // Small enough that any single event stays within 1 KiB of the
            // target while the per-event sizes still vary.
            size_jitter: 0.025,
            background_rate: 3.0,
        }
    }
}

impl GeneratorConfig {
    /// Nominal beam spot for a run; drifts slowly with the run number.
    pub fn beam_spot(&self, run: u32) -> [f64; 3] {
        [
            0.10 + 0.002 * f64::from(run % 11),
            -0.05 + 0.001 * f64::from(run % 7),
            0.30 + 0.010 * f64::from(run % 5),
        ]
    }
}

/// One synthetic beam event, deterministic in (seed stream, run, number).
pub fn beam_event(cfg: &GeneratorConfig, stream: u64, run: u32, number: u64) -> Event {
    let mut rng = event_rng(stream, run, number);
    let mut event = Event::new(cfg.experiment, run, number, Provenance::Beam);

    let ntrk = poisson(&mut rng, 8.0) as i32;
    let ncls = poisson(&mut rng, 12.0) as i32;
    let nneu = poisson(&mut rng, 4.0) as i32;
    let esum = rng.random_range(500..11_500);
    let ntrig = rng.random_range(1..16);
    event
        .put_bank(encode_summary(&[
            (0, ntrk),
            (1, ncls),
            (2, nneu),
            (3, esum),
            (4, ntrig),
        ]))
        .expect("fresh event");

    let spot = cfg.beam_spot(run);
    let spread = 0.02;
    event
        .put_bank(encode_vertex(
            spot[0] + spread * (rng.random::<f64>() - 0.5),
            spot[1] + spread * (rng.random::<f64>() - 0.5),
            spot[2] + spread * (rng.random::<f64>() - 0.5),
        ))
        .expect("fresh event");

    let bght = poisson(&mut rng, cfg.background_rate * 2.0 / 3.0);
    let bgec = poisson(&mut rng, cfg.background_rate / 3.0);
    event
        .put_bank(random_bank(&mut rng, BACKGROUND_BANKS[0], BGHT_RECORD_WIDTH, bght).unwrap())
        .expect("fresh event");
    event
        .put_bank(random_bank(&mut rng, BACKGROUND_BANKS[1], BGEC_RECORD_WIDTH, bgec).unwrap())
        .expect("fresh event");

    // Bulk readout sized so the whole record lands on the jittered target.
    let jitter = 1.0 + cfg.size_jitter * (2.0 * rng.random::<f64>() - 1.0);
    let target = (cfg.raw_target_bytes as f64 * jitter) as usize;
    let fixed = crate::event::uncompressed_record_size(&event) + 18;
    let records = target.saturating_sub(fixed) / RAW_RECORD_WIDTH as usize;
    event
        .put_bank(random_bank(&mut rng, RAW_BANK, RAW_RECORD_WIDTH, records as u32).unwrap())
        .expect("fresh event");

    event.seal();
    event
}

/// Generates one run's raw file; event numbers are 1..=count.
pub fn generate_run_file(
    cfg: &GeneratorConfig,
    stream: u64,
    run: u32,
    count: u64,
    path: impl AsRef<std::path::Path>,
    compression: bool,
) -> Result<u64, EventError> {
    let header = EventFileHeader::new(FileType::Raw, cfg.experiment, run, "beam");
    let mut writer = EventFileWriter::create(path, header, compression)?;
    for number in 1..=count {
        writer.append_event(&beam_event(cfg, stream, run, number))?;
    }
    writer.close()
}
