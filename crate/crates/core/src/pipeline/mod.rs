//! Module-chain event processing.
//!
//! Processing code is packaged as named modules in a [`ModuleRegistry`]; a
//! text script selects and parameterizes them into an ordered [`Path`],
//! which [`run_path`] drives over an event stream with run-boundary
//! callbacks. Output is a pure function of (path, parameters, input), so the
//! same script over the same file produces byte-identical results wherever
//! it runs — the property the distributed production layer builds on.

pub mod kit;

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::event::{Event, EventError, EventFileHeader, EventFileReader, EventFileWriter, FileType};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("module {0:?} already registered")]
    DuplicateModuleName(String),
    #[error("line {line}: unknown module {name:?}")]
    UnknownModule { line: usize, name: String },
    #[error("line {line}: {message}")]
    ScriptSyntax { line: usize, message: String },
    #[error("module {module:?}: {message}")]
    ModuleError { module: String, message: String },
    #[error("module {module:?}: bad parameter {key:?}: {message}")]
    BadParameter {
        module: String,
        key: String,
        message: String,
    },
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a module decided about one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleStatus {
    /// Pass the event on to the next module.
    Ok,
    /// Drop the event from the path; it never reaches the sink.
    SkipEvent,
}

/// A processing module. Failures abort the whole job.
pub trait Module: Send {
    fn begin_run(&mut self, _experiment: u32, _run: u32) -> Result<(), PipelineError> {
        Ok(())
    }

    fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError>;

    fn end_run(&mut self, _experiment: u32, _run: u32) -> Result<(), PipelineError> {
        Ok(())
    }
}

/// One module selection with its parameters, as written in a script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleSpec {
    pub name: String,
    pub params: Vec<(String, String)>,
}

impl ModuleSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
        }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.push((key.into(), value.into()));
        self
    }

    /// Last occurrence wins, so later `key=value` pairs override earlier ones.
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parses a parameter, falling back to `default` when absent.
    pub fn param_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, PipelineError>
    where
        T::Err: fmt::Display,
    {
        match self.param(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e: T::Err| PipelineError::BadParameter {
                module: self.name.clone(),
                key: key.to_owned(),
                message: e.to_string(),
            }),
        }
    }
}

type ModuleFactory = Box<dyn Fn(&ModuleSpec) -> Result<Box<dyn Module>, PipelineError> + Send + Sync>;

/// Name-keyed factory table for module construction.
#[derive(Default)]
pub struct ModuleRegistry {
    factories: BTreeMap<String, ModuleFactory>,
}

impl ModuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry preloaded with the built-in kit.
    pub fn with_builtins() -> Self {
        let mut registry = Self::new();
        kit::register_builtins(&mut registry).expect("builtin names are unique");
        registry
    }

    pub fn register<F>(&mut self, name: impl Into<String>, factory: F) -> Result<(), PipelineError>
    where
        F: Fn(&ModuleSpec) -> Result<Box<dyn Module>, PipelineError> + Send + Sync + 'static,
    {
        let name = name.into();
        if self.factories.contains_key(&name) {
            return Err(PipelineError::DuplicateModuleName(name));
        }
        self.factories.insert(name, Box::new(factory));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn instantiate(&self, spec: &ModuleSpec) -> Result<Box<dyn Module>, PipelineError> {
        let factory = self
            .factories
            .get(&spec.name)
            .ok_or_else(|| PipelineError::UnknownModule {
                line: 0,
                name: spec.name.clone(),
            })?;
        factory(spec)
    }
}

/// Ordered module chain built from a script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub id: String,
    pub modules: Vec<ModuleSpec>,
}

impl Path {
    pub fn new(id: impl Into<String>, modules: Vec<ModuleSpec>) -> Self {
        Self {
            id: id.into(),
            modules,
        }
    }

    /// The explicit identity path.
    pub fn identity(id: impl Into<String>) -> Self {
        Self::new(id, Vec::new())
    }

    /// Normalized script text; parsing it back yields an equal path.
    pub fn to_script(&self) -> String {
        let mut out = String::new();
        for spec in &self.modules {
            out.push_str("module ");
            out.push_str(&spec.name);
            for (k, v) in &spec.params {
                out.push(' ');
                out.push_str(k);
                out.push('=');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }

    fn instantiate(&self, registry: &ModuleRegistry) -> Result<Vec<Box<dyn Module>>, PipelineError> {
        self.modules
            .iter()
            .map(|spec| registry.instantiate(spec))
            .collect()
    }
}

/// An instantiated path processing one event at a time.
///
/// Both the sequential runner and the production workers drive their events
/// through this, so an event gets identical treatment wherever it lands.
pub struct ActivePath {
    specs: Vec<ModuleSpec>,
    modules: Vec<Box<dyn Module>>,
    current_run: Option<(u32, u32)>,
    cost: Vec<Duration>,
}

impl ActivePath {
    pub fn new(path: &Path, registry: &ModuleRegistry) -> Result<Self, PipelineError> {
        let modules = path.instantiate(registry)?;
        Ok(Self {
            specs: path.modules.clone(),
            modules,
            current_run: None,
            cost: vec![Duration::ZERO; path.modules.len()],
        })
    }

    /// Runs one event through the chain, firing run boundaries as needed.
    /// Returns the sealed output event, or `None` when a module skipped it.
    pub fn process(&mut self, event: &Event) -> Result<Option<Event>, PipelineError> {
        let identity = (event.experiment(), event.run());
        if self.current_run != Some(identity) {
            if let Some((exp, run)) = self.current_run {
                self.boundary(exp, run, false)?;
            }
            self.boundary(identity.0, identity.1, true)?;
            self.current_run = Some(identity);
        }
        let mut working = event.to_unsealed();
        for (index, module) in self.modules.iter_mut().enumerate() {
            let started = Instant::now();
            let status = module.process(&mut working);
            self.cost[index] += started.elapsed();
            match status {
                Ok(ModuleStatus::Ok) => {}
                Ok(ModuleStatus::SkipEvent) => return Ok(None),
                Err(e) => return Err(self.attribute(index, e)),
            }
        }
        working.seal();
        Ok(Some(working))
    }

    /// Fires the final `end_run` once the stream is finished.
    pub fn finish(&mut self) -> Result<(), PipelineError> {
        if let Some((exp, run)) = self.current_run.take() {
            self.boundary(exp, run, false)?;
        }
        Ok(())
    }

    /// Accumulated processing cost per module, path order.
    pub fn module_cost(&self) -> Vec<(String, Duration)> {
        self.specs
            .iter()
            .zip(&self.cost)
            .map(|(s, d)| (s.name.clone(), *d))
            .collect()
    }

    fn boundary(&mut self, experiment: u32, run: u32, begin: bool) -> Result<(), PipelineError> {
        for index in 0..self.modules.len() {
            let result = if begin {
                self.modules[index].begin_run(experiment, run)
            } else {
                self.modules[index].end_run(experiment, run)
            };
            if let Err(e) = result {
                return Err(self.attribute(index, e));
            }
        }
        Ok(())
    }

    fn attribute(&self, index: usize, error: PipelineError) -> PipelineError {
        match error {
            e @ PipelineError::ModuleError { .. } => e,
            other => PipelineError::ModuleError {
                module: self.specs[index].name.clone(),
                message: other.to_string(),
            },
        }
    }
}

/// Parses a path script against a registry.
///
/// One directive per line: `module <name> [key=value …]`. `#` starts a
/// comment, blank lines are ignored. Module names must be registered.
pub fn build_path(id: &str, script: &str, registry: &ModuleRegistry) -> Result<Path, PipelineError> {
    let mut modules = Vec::new();
    for (idx, raw_line) in script.lines().enumerate() {
        let line = idx + 1;
        let text = raw_line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut tokens = text.split_whitespace();
        let directive = tokens.next().expect("non-empty line");
        if directive != "module" {
            return Err(PipelineError::ScriptSyntax {
                line,
                message: format!("unknown directive {directive:?}"),
            });
        }
        let name = tokens.next().ok_or_else(|| PipelineError::ScriptSyntax {
            line,
            message: "missing module name".into(),
        })?;
        if !registry.contains(name) {
            return Err(PipelineError::UnknownModule {
                line,
                name: name.to_owned(),
            });
        }
        let mut spec = ModuleSpec::new(name);
        for token in tokens {
            let Some((key, value)) = token.split_once('=') else {
                return Err(PipelineError::ScriptSyntax {
                    line,
                    message: format!("expected key=value, got {token:?}"),
                });
            };
            if key.is_empty() {
                return Err(PipelineError::ScriptSyntax {
                    line,
                    message: format!("empty parameter key in {token:?}"),
                });
            }
            spec.params.push((key.to_owned(), value.to_owned()));
        }
        modules.push(spec);
    }
    Ok(Path::new(id, modules))
}

/// Counters from one [`run_path`] invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStatistics {
    pub events_seen: u64,
    pub events_delivered: u64,
    pub events_skipped: u64,
    pub events_errored: u64,
    /// Accumulated wall-clock processing cost per module, path order.
    pub module_cost: Vec<(String, Duration)>,
}

impl RunStatistics {
    /// seen = delivered + skipped + errored, always.
    pub fn is_conserved(&self) -> bool {
        self.events_seen == self.events_delivered + self.events_skipped + self.events_errored
    }

    pub fn module_cost_ms(&self) -> Vec<(String, f64)> {
        self.module_cost
            .iter()
            .map(|(n, d)| (n.clone(), d.as_secs_f64() * 1e3))
            .collect()
    }
}

/// A module failure, carrying the statistics gathered up to the abort.
#[derive(Debug)]
pub struct PathAbort {
    pub error: PipelineError,
    pub partial: RunStatistics,
}

impl fmt::Display for PathAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "path aborted: {}", self.error)
    }
}

impl std::error::Error for PathAbort {}

/// Drives `source` through the path in order, delivering surviving events to
/// `sink`. Fires `begin_run`/`end_run` at run boundaries.
pub fn run_path<I, S>(
    path: &Path,
    registry: &ModuleRegistry,
    source: I,
    mut sink: S,
) -> Result<RunStatistics, PathAbort>
where
    I: IntoIterator<Item = Result<Event, EventError>>,
    S: FnMut(&Event) -> Result<(), EventError>,
{
    let mut stats = RunStatistics::default();
    let mut active = match ActivePath::new(path, registry) {
        Ok(a) => a,
        Err(error) => {
            return Err(PathAbort {
                error,
                partial: stats,
            })
        }
    };

    let finalize = |active: &ActivePath, mut stats: RunStatistics| {
        stats.module_cost = active.module_cost();
        stats
    };
    let abort = |active: &ActivePath, error: PipelineError, stats: RunStatistics| {
        let mut partial = finalize(active, stats);
        partial.events_errored += 1;
        Err(PathAbort { error, partial })
    };

    for item in source {
        stats.events_seen += 1;
        let event = match item {
            Ok(e) => e,
            Err(e) => return abort(&active, PipelineError::Event(e), stats),
        };
        match active.process(&event) {
            Ok(Some(out)) => {
                if let Err(e) = sink(&out) {
                    return abort(&active, PipelineError::Event(e), stats);
                }
                stats.events_delivered += 1;
            }
            Ok(None) => stats.events_skipped += 1,
            Err(e) => return abort(&active, e, stats),
        }
    }
    if let Err(e) = active.finish() {
        return abort(&active, e, stats);
    }
    Ok(finalize(&active, stats))
}

/// Runs a path over one event file, writing survivors to a new file.
///
/// The output header copies the input identity and stream label; the file
/// type may be overridden (a reconstruction job writes DST from RAW).
pub fn run_path_over_file(
    path: &Path,
    registry: &ModuleRegistry,
    input: impl AsRef<std::path::Path>,
    output: impl AsRef<std::path::Path>,
    output_type: Option<FileType>,
    compression: bool,
) -> Result<RunStatistics, PathAbort> {
    let io_abort = |error: PipelineError| PathAbort {
        error,
        partial: RunStatistics::default(),
    };
    let reader = EventFileReader::open(input).map_err(|e| io_abort(e.into()))?;
    let in_header = reader.header().clone();
    let header = EventFileHeader::new(
        output_type.unwrap_or(in_header.file_type),
        in_header.experiment,
        in_header.run,
        in_header.stream_label.clone(),
    );
    let mut writer =
        EventFileWriter::create(output, header, compression).map_err(|e| io_abort(e.into()))?;
    let stats = run_path(path, registry, reader, |event| {
        writer.append_event(event)
    })?;
    writer.close().map_err(|e| io_abort(e.into()))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Bank, BankDescriptor, Provenance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    struct AddBank(&'static str);

    impl Module for AddBank {
        fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
            event.put_bank(Bank::new(
                BankDescriptor::new(self.0, 1, 1)?,
                vec![event.event_number() as u8],
            )?)?;
            Ok(ModuleStatus::Ok)
        }
    }

    struct SkipAll;

    impl Module for SkipAll {
        fn process(&mut self, _event: &mut Event) -> Result<ModuleStatus, PipelineError> {
            Ok(ModuleStatus::SkipEvent)
        }
    }

    struct FailOn(u64);

    impl Module for FailOn {
        fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
            if event.event_number() == self.0 {
                Err(PipelineError::ModuleError {
                    module: "failon".into(),
                    message: "induced failure".into(),
                })
            } else {
                Ok(ModuleStatus::Ok)
            }
        }
    }

    fn test_registry() -> ModuleRegistry {
        let mut r = ModuleRegistry::new();
        r.register("add_a", |_| Ok(Box::new(AddBank("A")) as Box<dyn Module>))
            .unwrap();
        r.register("add_b", |_| Ok(Box::new(AddBank("B")) as Box<dyn Module>))
            .unwrap();
        r.register("skip_all", |_| Ok(Box::new(SkipAll) as Box<dyn Module>))
            .unwrap();
        r.register("fail_on", |spec| {
            Ok(Box::new(FailOn(spec.param_or("event", 0u64)?)) as Box<dyn Module>)
        })
        .unwrap();
        r
    }

    fn events(n: u64) -> Vec<Result<Event, EventError>> {
        (1..=n)
            .map(|i| {
                let mut e = Event::new(1, 1, i, Provenance::Beam);
                e.seal();
                Ok(e)
            })
            .collect()
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut r = test_registry();
        let err = r
            .register("add_a", |_| Ok(Box::new(SkipAll) as Box<dyn Module>))
            .unwrap_err();
        assert!(matches!(err, PipelineError::DuplicateModuleName(n) if n == "add_a"));
    }

    #[test]
    fn registered_names_resolve_into_path() {
        let r = test_registry();
        let path = build_path("t", "module add_a\nmodule add_b\nmodule skip_all", &r).unwrap();
        assert_eq!(path.modules.len(), 3);
        assert!(path.instantiate(&r).is_ok());
    }

    #[test]
    fn script_parse_binds_parameters_in_order() {
        let r = test_registry();
        let path = build_path("t", "module add_a\nmodule fail_on event=3 extra=x", &r).unwrap();
        assert_eq!(path.modules[0], ModuleSpec::new("add_a"));
        assert_eq!(
            path.modules[1],
            ModuleSpec::new("fail_on")
                .with_param("event", "3")
                .with_param("extra", "x")
        );
    }

    #[test]
    fn unknown_module_reports_line() {
        let r = test_registry();
        let err = build_path("t", "module add_a\n\nmodule nope", &r).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::UnknownModule { line: 3, name } if name == "nope"
        ));
    }

    #[test]
    fn syntax_errors_report_line() {
        let r = test_registry();
        let err = build_path("t", "# fine\nrun add_a", &r).unwrap_err();
        assert!(matches!(err, PipelineError::ScriptSyntax { line: 2, .. }));
        let err = build_path("t", "module add_a noequals", &r).unwrap_err();
        assert!(matches!(err, PipelineError::ScriptSyntax { line: 1, .. }));
        let err = build_path("t", "module", &r).unwrap_err();
        assert!(matches!(err, PipelineError::ScriptSyntax { line: 1, .. }));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let r = test_registry();
        let script = "\n# leading comment\nmodule add_a # trailing\n\n   \nmodule add_b\n";
        let path = build_path("t", script, &r).unwrap();
        assert_eq!(path.modules.len(), 2);
    }

    #[test]
    fn parse_print_fixed_point_on_random_scripts() {
        let r = test_registry();
        let names = ["add_a", "add_b", "skip_all", "fail_on"];
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..50 {
            let mut script = String::new();
            for _ in 0..rng.random_range(0..8) {
                let name = names[rng.random_range(0..names.len())];
                script.push_str(&format!("module {name}"));
                for p in 0..rng.random_range(0..3) {
                    script.push_str(&format!(" k{p}={}", rng.random_range(0..100)));
                }
                script.push('\n');
            }
            let parsed = build_path("t", &script, &r).unwrap();
            let reparsed = build_path("t", &parsed.to_script(), &r).unwrap();
            assert_eq!(parsed, reparsed);
            // Normalized text is itself a fixed point.
            assert_eq!(parsed.to_script(), reparsed.to_script());
        }
    }

    #[test]
    fn identity_path_passes_everything_through() {
        let r = test_registry();
        let mut seen = Vec::new();
        let stats = run_path(&Path::identity("id"), &r, events(10), |e| {
            seen.push(e.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(stats.events_seen, 10);
        assert_eq!(stats.events_delivered, 10);
        assert_eq!(seen.len(), 10);
        assert!(stats.is_conserved());
        // Unchanged events.
        for (i, e) in seen.iter().enumerate() {
            assert_eq!(e.event_number(), i as u64 + 1);
            assert_eq!(e.bank_count(), 0);
        }
    }

    #[test]
    fn skip_module_delivers_nothing() {
        let r = test_registry();
        let path = build_path("t", "module skip_all", &r).unwrap();
        let mut delivered = 0;
        let stats = run_path(&path, &r, events(25), |_| {
            delivered += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(delivered, 0);
        assert_eq!(stats.events_skipped, 25);
        assert!(stats.is_conserved());
    }

    #[test]
    fn two_module_path_equals_sequential_composition() {
        let r = test_registry();
        let path = build_path("t", "module add_a\nmodule add_b", &r).unwrap();
        let mut chained = Vec::new();
        run_path(&path, &r, events(100), |e| {
            chained.push(e.clone());
            Ok(())
        })
        .unwrap();

        // Reference: apply the two modules one after the other in a plain loop.
        let mut reference = Vec::new();
        for item in events(100) {
            let mut working = item.unwrap().to_unsealed();
            AddBank("A").process(&mut working).unwrap();
            AddBank("B").process(&mut working).unwrap();
            working.seal();
            reference.push(working);
        }
        assert_eq!(chained, reference);
        assert!(chained
            .iter()
            .all(|e| e.bank("A").is_some() && e.bank("B").is_some()));
    }

    #[test]
    fn composition_equals_two_stage_run() {
        let r = test_registry();
        let p1 = build_path("p1", "module add_a", &r).unwrap();
        let p2 = build_path("p2", "module add_b", &r).unwrap();
        let combined = Path::new("p12", [p1.modules.clone(), p2.modules.clone()].concat());

        let mut one_shot = Vec::new();
        run_path(&combined, &r, events(40), |e| {
            one_shot.push(e.clone());
            Ok(())
        })
        .unwrap();

        let mut staged = Vec::new();
        let mut intermediate = Vec::new();
        run_path(&p1, &r, events(40), |e| {
            intermediate.push(Ok(e.clone()));
            Ok(())
        })
        .unwrap();
        run_path(&p2, &r, intermediate, |e| {
            staged.push(e.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(one_shot, staged);
    }

    #[test]
    fn module_error_aborts_with_partial_statistics() {
        let r = test_registry();
        let path = build_path("t", "module fail_on event=5", &r).unwrap();
        let abort = run_path(&path, &r, events(10), |_| Ok(())).unwrap_err();
        assert!(matches!(abort.error, PipelineError::ModuleError { .. }));
        assert_eq!(abort.partial.events_seen, 5);
        assert_eq!(abort.partial.events_delivered, 4);
        assert_eq!(abort.partial.events_errored, 1);
        assert!(abort.partial.is_conserved());
    }

    #[test]
    fn run_boundaries_fire_in_order() {
        use std::sync::{Arc, Mutex};
        let log = Arc::new(Mutex::new(Vec::new()));

        struct Boundary(Arc<Mutex<Vec<String>>>);
        impl Module for Boundary {
            fn begin_run(&mut self, _e: u32, run: u32) -> Result<(), PipelineError> {
                self.0.lock().unwrap().push(format!("begin {run}"));
                Ok(())
            }
            fn process(&mut self, event: &mut Event) -> Result<ModuleStatus, PipelineError> {
                self.0
                    .lock()
                    .unwrap()
                    .push(format!("event {}:{}", event.run(), event.event_number()));
                Ok(ModuleStatus::Ok)
            }
            fn end_run(&mut self, _e: u32, run: u32) -> Result<(), PipelineError> {
                self.0.lock().unwrap().push(format!("end {run}"));
                Ok(())
            }
        }

        let mut r = ModuleRegistry::new();
        let handle = log.clone();
        r.register("boundary", move |_| {
            Ok(Box::new(Boundary(handle.clone())) as Box<dyn Module>)
        })
        .unwrap();
        let path = build_path("t", "module boundary", &r).unwrap();

        let source: Vec<Result<Event, EventError>> = [(1u32, 1u64), (1, 2), (2, 1)]
            .iter()
            .map(|&(run, n)| {
                let mut e = Event::new(1, run, n, Provenance::Beam);
                e.seal();
                Ok(e)
            })
            .collect();
        run_path(&path, &r, source, |_| Ok(())).unwrap();

        assert_eq!(
            *log.lock().unwrap(),
            vec![
                "begin 1", "event 1:1", "event 1:2", "end 1", "begin 2", "event 2:1", "end 2"
            ]
        );
    }
}
