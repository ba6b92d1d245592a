//! Verb and flag tables, argv parsing and config-file merging.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Arg, ArgAction};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verb {
    Generate,
    Embed,
    Retrieve,
    Train,
    Evaluate,
    Sweep,
    Ablate,
    Sensitivity,
    Ensemble,
    Serve,
}

/// One command-line flag. `value` is the placeholder shown in help; `None`
/// marks a switch.
#[derive(Debug, Clone, Copy)]
pub struct Flag {
    pub name: &'static str,
    pub value: Option<&'static str>,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn opt(name: &'static str, value: &'static str, default: Option<&'static str>, help: &'static str) -> Flag {
    Flag { name, value: Some(value), default, help }
}

const fn switch(name: &'static str, help: &'static str) -> Flag {
    Flag { name, value: None, default: None, help }
}

const COMMON: &[Flag] = &[
    opt("config", "PATH", None, "flat key=value file; flags override its values"),
    opt("snapshot", "PATH", None, "where to write the config snapshot (default: next to the main output)"),
    switch("sequential", "run data-parallel loops on one thread"),
];

const CORPUS: &[Flag] = &[
    opt("corpus", "PATH", None, "corpus JSONL (photos, dialogues, provided descriptors)"),
    opt("split", "NAME", Some("test"), "split label of --corpus: train, val or test"),
];

const DESCRIPTORS: &[Flag] = &[
    opt("variant", "NAME", Some("queries"), "descriptor variant: diag, summary, guessing, queries, provided_caption"),
    opt("queries", "KEYS", None, "comma-separated query keys (default: the five standard queries)"),
    opt("cache", "PATH", None, "descriptor cache JSONL; read first, appended on misses"),
    opt("llm-url", "URL", None, "chat-completions base URL (falls back to LLM_BASE_URL)"),
    opt("llm-model", "NAME", Some("llama-2-13b-chat"), "model name sent to the LLM and used as cache key"),
    opt("llm-timeout", "SECS", Some("120"), "per-request LLM timeout"),
    opt("llm-retries", "N", Some("3"), "retries on transient LLM errors"),
    opt("parallelism", "N", Some("4"), "concurrent LLM requests"),
];

const ENCODER: &[Flag] = &[
    opt("encoder", "KIND", None, "mock, store or remote (default: store if --store, remote if an embed URL is set, else mock)"),
    opt("store", "PATH", None, "EMBS embedding store"),
    opt("embed-url", "URL", None, "embedding service base URL (falls back to EMBED_BASE_URL)"),
    opt("mock-dim", "N", Some("64"), "mock encoder dimension"),
    opt("mock-seed", "N", Some("0"), "mock encoder seed"),
    opt("char-budget", "N", Some("4096"), "characters kept before encoding"),
];

const SCORING: &[Flag] = &[
    opt("lambda", "X", Some("1.0"), "weight of the vision score"),
    opt("checkpoint", "PATH", None, "trained adapter checkpoint"),
];

const OUT: Flag = opt("out", "PATH", None, "output path");

const GENERATE: &[Flag] = &[];
const EMBED: &[Flag] = &[
    OUT,
    opt("variants", "NAMES", None, "descriptor variants to embed (default: --variant)"),
];
const RETRIEVE: &[Flag] = &[
    opt("dialogue", "PATH", Some("-"), "dialogue JSON file, or - for stdin"),
    opt("k", "N", Some("10"), "number of photos returned"),
    opt("out", "PATH", None, "also write the ranking here"),
];
const TRAIN: &[Flag] = &[
    opt("train-corpus", "PATH", None, "training corpus JSONL"),
    opt("val-corpus", "PATH", None, "validation corpus JSONL"),
    OUT,
    opt("epochs", "N", Some("10"), "training epochs"),
    opt("batch-size", "N", Some("56"), "pairs per batch"),
    opt("lr", "X", Some("0.00001"), "Adam learning rate"),
    opt("lambda", "X", Some("1.0"), "weight of the vision loss"),
    opt("seed", "N", Some("0"), "shuffle seed"),
    switch("symmetric", "average row and column cross-entropies"),
];
const EVALUATE: &[Flag] = &[OUT, opt("seeds", "LIST", Some("0"), "seeds, as a comma list or a range a..b")];
const SWEEP: &[Flag] = &[OUT, opt("lambdas", "LIST", None, "lambda grid (default 0,0.2,...,2.0)")];
const ABLATE: &[Flag] = &[
    OUT,
    opt("remove", "KEYS", None, "query keys to remove one at a time (default: every base key)"),
    opt("add", "KEYS", Some("atmosphere or mood,lighting"), "query keys to add one at a time"),
];
const SENSITIVITY: &[Flag] = &[
    OUT,
    opt("rates", "LIST", Some("0,0.15,0.25,0.35"), "perturbation rates"),
    opt("modes", "LIST", Some("missing,incorrect,both"), "perturbation modes"),
    opt("seeds", "LIST", Some("0..10"), "perturbation seeds, as a comma list or a range a..b"),
    opt("vocab-corpus", "PATH", None, "corpus whose objects replace incorrect ones (default: --corpus)"),
];
const ENSEMBLE: &[Flag] = &[
    OUT,
    opt("variants", "NAMES", Some("diag,summary,guessing,queries"), "descriptor variants to combine"),
    opt("weights", "LIST", None, "one weight per variant (default: equal, or tuned with --tune-on)"),
    opt("tune-on", "PATH", None, "validation corpus for a weight grid search"),
    opt("weight-grid", "LIST", Some("0,0.25,0.5,0.75,1"), "candidate weights for --tune-on"),
    opt("ensemble-mode", "MODE", Some("zscore"), "zscore or rrf"),
    opt("rrf-k", "N", Some("60"), "reciprocal-rank constant for --ensemble-mode rrf"),
];
const SERVE: &[Flag] = &[
    opt("addr", "HOST:PORT", Some("127.0.0.1:8080"), "listen address"),
    opt("k", "N", Some("10"), "default number of photos per request"),
    opt("workers", "N", Some("4"), "request worker threads, which also bounds concurrent LLM calls"),
];

impl Verb {
    pub const ALL: [Verb; 10] = [
        Verb::Generate,
        Verb::Embed,
        Verb::Retrieve,
        Verb::Train,
        Verb::Evaluate,
        Verb::Sweep,
        Verb::Ablate,
        Verb::Sensitivity,
        Verb::Ensemble,
        Verb::Serve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Generate => "generate",
            Verb::Embed => "embed",
            Verb::Retrieve => "retrieve",
            Verb::Train => "train",
            Verb::Evaluate => "evaluate",
            Verb::Sweep => "sweep",
            Verb::Ablate => "ablate",
            Verb::Sensitivity => "sensitivity",
            Verb::Ensemble => "ensemble",
            Verb::Serve => "serve",
        }
    }

    fn about(self) -> &'static str {
        match self {
            Verb::Generate => "Generate descriptors for every dialogue into a cache",
            Verb::Embed => "Encode descriptors, object lists and images into an EMBS store",
            Verb::Retrieve => "Rank the corpus photos for one dialogue",
            Verb::Train => "Train linear adapters and write a checkpoint",
            Verb::Evaluate => "Recall@{1,5,10} on a corpus",
            Verb::Sweep => "Recall over a grid of lambda values",
            Verb::Ablate => "Recall with query keys removed or added",
            Verb::Sensitivity => "Recall under simulated object-detection errors",
            Verb::Ensemble => "Recall of a score-level ensemble of descriptor variants",
            Verb::Serve => "Serve POST /retrieve over HTTP",
        }
    }

    /// Flags in the order they appear in help.
    pub fn flags(self) -> Vec<Flag> {
        let groups: &[&[Flag]] = match self {
            Verb::Generate => &[COMMON, CORPUS, DESCRIPTORS, GENERATE],
            Verb::Embed => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, EMBED],
            Verb::Retrieve => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, SCORING, RETRIEVE],
            Verb::Train => &[COMMON, DESCRIPTORS, ENCODER, TRAIN],
            Verb::Evaluate => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, SCORING, EVALUATE],
            Verb::Sweep => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, SCORING, SWEEP],
            Verb::Ablate => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, SCORING, ABLATE],
            Verb::Sensitivity => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, SCORING, SENSITIVITY],
            Verb::Ensemble => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, SCORING, ENSEMBLE],
            Verb::Serve => &[COMMON, CORPUS, DESCRIPTORS, ENCODER, SCORING, SERVE],
        };
        groups.iter().flat_map(|g| g.iter().copied()).collect()
    }

    pub fn required(self) -> &'static [&'static str] {
        match self {
            Verb::Generate => &["corpus", "cache"],
            Verb::Embed => &["corpus", "out"],
            Verb::Retrieve | Verb::Serve => &["corpus"],
            Verb::Train => &["train-corpus", "val-corpus", "out"],
            Verb::Evaluate | Verb::Sweep | Verb::Ablate | Verb::Sensitivity | Verb::Ensemble => &["corpus", "out"],
        }
    }

    pub fn flag(self, name: &str) -> Option<Flag> {
        self.flags().into_iter().find(|f| f.name == name)
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Verb {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| CliError::UnknownVerb(s.to_string()))
    }
}

/// A fully merged invocation: flag values over config-file values over
/// defaults. Switches are stored as `"true"` / `"false"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub verb: Verb,
    pub options: BTreeMap<String, String>,
    pub config_path: Option<PathBuf>,
}

impl Command {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.options.get(name).map(String::as_str)
    }

    pub fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name).ok_or_else(|| CliError::MissingRequired(format!("--{name}")))
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.get(name).map(PathBuf::from)
    }

    pub fn switch(&self, name: &str) -> bool {
        self.get(name) == Some("true")
    }

    /// Parses an option value, naming the flag on failure.
    pub fn parse<T: FromStr>(&self, name: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.get(name).map(|raw| parse_value(name, raw)).transpose()
    }

    pub fn parse_or<T: FromStr>(&self, name: &str, fallback: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parse(name)?.unwrap_or(fallback))
    }

    /// Comma-separated values, trimmed, empty items dropped.
    pub fn list(&self, name: &str) -> Option<Vec<String>> {
        self.get(name).map(split_list)
    }

    pub fn parse_list<T: FromStr>(&self, name: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.list(name).map(|items| items.iter().map(|s| parse_value(name, s)).collect()).transpose()
    }

    /// Seeds as `0,3,7` or as a half-open range `0..10`.
    pub fn seeds(&self, name: &str) -> Result<Vec<u64>, CliError> {
        let Some(raw) = self.get(name) else { return Ok(vec![0]) };
        let seeds = match raw.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (parse_value(name, a.trim())?, parse_value(name, b.trim())?);
                (a..b).collect()
            }
            None => self.parse_list(name)?.unwrap_or_default(),
        };
        if seeds.is_empty() {
            return Err(invalid(name, raw, "no seeds"));
        }
        Ok(seeds)
    }
}

pub(crate) fn invalid(flag: &str, value: &str, reason: impl fmt::Display) -> CliError {
    CliError::InvalidValue { flag: format!("--{flag}"), value: value.to_string(), reason: reason.to_string() }
}

fn parse_value<T: FromStr>(name: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    raw.parse().map_err(|e| invalid(name, raw, e))
}

pub(crate) fn split_list(raw: &str) -> Vec<String> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// The clap definition, also used to render `--help`.
pub fn clap_command() -> clap::Command {
    let mut cmd = clap::Command::new("photocue")
        .about("Dialogue-to-photo retrieval with LLM visual descriptors")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for verb in Verb::ALL {
        let mut sub = clap::Command::new(verb.name()).about(verb.about());
        for flag in verb.flags() {
            let mut arg = Arg::new(flag.name).long(flag.name).help(flag.help);
            arg = match flag.value {
                Some(v) => arg.value_name(v).action(ArgAction::Set).allow_hyphen_values(true),
                None => arg.action(ArgAction::SetTrue),
            };
            if let Some(d) = flag.default {
                arg = arg.help(format!("{} [default: {d}]", flag.help));
            }
            if verb.required().contains(&flag.name) {
                arg = arg.help(format!("{} [required]", flag.help));
            }
            sub = sub.arg(arg);
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn context(err: &clap::Error, kind: ContextKind) -> String {
    match err.get(kind) {
        Some(ContextValue::String(s)) => s.clone(),
        Some(ContextValue::Strings(v)) => v.join(" "),
        Some(other) => other.to_string(),
        None => String::new(),
    }
}

fn map_clap_error(err: clap::Error) -> CliError {
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Help(err.to_string()),
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
            CliError::Usage(err.render().to_string())
        }
        ErrorKind::InvalidSubcommand => CliError::UnknownVerb(context(&err, ContextKind::InvalidSubcommand)),
        ErrorKind::UnknownArgument => CliError::UnknownFlag(context(&err, ContextKind::InvalidArg)),
        _ => CliError::Usage(err.render().to_string()),
    }
}

/// Reads a flat `key = value` file. Blank lines and lines starting with `#`
/// are ignored; keys may carry a leading `--`; values may be quoted.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key = value", path.display(), i + 1))
        })?;
        let key = key.trim().trim_start_matches("--").to_string();
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value)
            .to_string();
        out.push((key, value));
    }
    Ok(out)
}

/// Parses `argv` (without the program name) into a validated [`Command`].
pub fn parse_command<I, S>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    // Report unknown verbs before clap so the error carries the verb itself.
    if let Some(first) = argv.first() {
        if !first.starts_with('-') && first != "help" {
            first.parse::<Verb>()?;
        }
    }
    let matches = clap_command()
        .try_get_matches_from(std::iter::once("photocue".to_string()).chain(argv))
        .map_err(map_clap_error)?;
    let (name, sub) = matches.subcommand().ok_or_else(|| CliError::Usage("no verb given".into()))?;
    let verb: Verb = name.parse()?;

    let mut flags = BTreeMap::new();
    for flag in verb.flags() {
        match flag.value {
            Some(_) => {
                if let Some(v) = sub.get_one::<String>(flag.name) {
                    flags.insert(flag.name.to_string(), v.clone());
                }
            }
            None => {
                if sub.get_flag(flag.name) {
                    flags.insert(flag.name.to_string(), "true".to_string());
                }
            }
        }
    }

    let config_path = flags.remove("config").map(PathBuf::from);
    let mut options = BTreeMap::new();
    for flag in verb.flags() {
        if let Some(d) = flag.default {
            options.insert(flag.name.to_string(), d.to_string());
        }
    }
    if let Some(path) = &config_path {
        for (key, value) in read_config_file(path)? {
            let flag = verb
                .flag(&key)
                .filter(|f| f.name != "config")
                .ok_or_else(|| CliError::UnknownFlag(format!("--{key} (in {})", path.display())))?;
            if flag.value.is_none() && !matches!(value.as_str(), "true" | "false") {
                return Err(invalid(&key, &value, "switches take true or false"));
            }
            options.insert(key, value);
        }
    }
    options.extend(flags);
    options.retain(|_, v| v != "false");

    for name in verb.required() {
        if !options.contains_key(*name) {
            return Err(CliError::MissingRequired(format!("--{name}")));
        }
    }
    Ok(Command { verb, options, config_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluate_with_lambda() {
        let cmd = parse_command(["evaluate", "--corpus", "test.jsonl", "--lambda", "1.0", "--out", "r"]).unwrap();
        assert_eq!(cmd.verb, Verb::Evaluate);
        assert_eq!(cmd.parse::<f64>("lambda").unwrap(), Some(1.0));
        assert_eq!(cmd.get("corpus"), Some("test.jsonl"));
        assert_eq!(cmd.get("split"), Some("test"));
    }

    #[test]
    fn missing_corpus_is_named() {
        let err = parse_command(["evaluate"]).unwrap_err();
        assert!(matches!(err, CliError::MissingRequired(ref f) if f == "--corpus"), "{err:?}");
    }

    #[test]
    fn unknown_verb_and_flag() {
        assert!(matches!(parse_command(["frobnicate"]), Err(CliError::UnknownVerb(v)) if v == "frobnicate"));
        let err = parse_command(["evaluate", "--corpus", "c", "--bogus", "1"]).unwrap_err();
        assert!(matches!(err, CliError::UnknownFlag(ref f) if f.contains("--bogus")), "{err:?}");
    }

    #[test]
    fn help_is_not_an_error_kind() {
        assert!(matches!(parse_command(["--help"]), Err(CliError::Help(_))));
        assert!(matches!(parse_command(["train", "--help"]), Err(CliError::Help(_))));
        assert!(matches!(parse_command(["help", "serve"]), Err(CliError::Help(_))));
        assert!(matches!(parse_command(Vec::<String>::new()), Err(CliError::Usage(_))));
    }

    #[test]
    fn seeds_accept_ranges_and_lists() {
        let cmd = parse_command(["evaluate", "--corpus", "c", "--out", "o", "--seeds", "2..5"]).unwrap();
        assert_eq!(cmd.seeds("seeds").unwrap(), vec![2, 3, 4]);
        let cmd = parse_command(["evaluate", "--corpus", "c", "--out", "o", "--seeds", "7, 1"]).unwrap();
        assert_eq!(cmd.seeds("seeds").unwrap(), vec![7, 1]);
        let cmd = parse_command(["evaluate", "--corpus", "c", "--out", "o", "--seeds", "x"]).unwrap();
        assert!(matches!(cmd.seeds("seeds"), Err(CliError::InvalidValue { .. })));
    }

    #[test]
    fn config_file_is_merged_under_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# defaults\ncorpus = test.jsonl\n--lambda = 0.5\nout=\"rep\"\nsequential = true\n").unwrap();
        let cfg_arg = cfg.to_str().unwrap();
        let cmd = parse_command(["evaluate", "--config", cfg_arg, "--lambda", "2"]).unwrap();
        assert_eq!(cmd.get("corpus"), Some("test.jsonl"));
        assert_eq!(cmd.get("lambda"), Some("2"));
        assert_eq!(cmd.get("out"), Some("rep"));
        assert!(cmd.switch("sequential"));
        assert_eq!(cmd.config_path.as_deref(), Some(cfg.as_path()));

        fs::write(&cfg, "corpus = c\nepochs = 3\n").unwrap();
        let err = parse_command(["evaluate", "--config", cfg_arg, "--out", "o"]).unwrap_err();
        assert!(matches!(err, CliError::UnknownFlag(ref f) if f.starts_with("--epochs")), "{err:?}");
    }

    #[test]
    fn every_verb_builds_and_lists_its_required_flags() {
        clap_command().debug_assert();
        for verb in Verb::ALL {
            for r in verb.required() {
                assert!(verb.flag(r).is_some(), "{verb} requires unknown flag {r}");
            }
        }
    }
}
