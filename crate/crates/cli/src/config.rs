//! Run configuration: a flat `key = value` file merged with command-line
//! flags, validated into a [`RunConfig`] before anything is computed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, Command};
use gsqg::evolution::PerturbationKind;

use crate::error::CliError;

/// Every key accepted in a config file or as a `--flag`.
pub const KEYS: &[(&str, &str)] = &[
    ("s", "fractional order, 0 < s < 1"),
    ("p", "profile exponent, 0 < p < 1/(1-s)"),
    ("L", "profile coefficient in J(t) = L t^(1+1/p) [0.12]"),
    ("kappa", "mass of each vortex [1]"),
    ("W", "speed coefficient [1]"),
    ("eps", "comma-separated list of eps values"),
    ("n", "pair window cells per side [256]"),
    ("nr", "radial nodes of the limiting solver [256]"),
    ("margin", "window half-width in limiting support radii [2.5]"),
    ("tol", "fixed-point tolerance"),
    ("max-iter", "iteration cap"),
    ("damping", "damping of rejected accelerated steps [0.5]"),
    ("anderson-depth", "Anderson history length [8]"),
    ("sym-every", "Steiner symmetrization period of the pair iteration, 0 = off [5]"),
    ("dt", "fixed time step; chosen from the CFL cap when absent"),
    ("cfl", "CFL cap [3]"),
    ("transits", "evolution horizon in self-transit times [1]"),
    ("perturb", "none, bump, shear or dimple [none]"),
    ("delta", "perturbation amplitude [0.2]"),
    ("trials", "seeded stability trials at delta and delta/2, 0 = off [0]"),
    ("trial-transits", "horizon of the stability trials [same as transits]"),
    ("diag-every", "diagnostic period in steps [10]"),
    ("snapshot-every", "field snapshot period in steps, 0 = off [0]"),
    ("shift", "x2 shift in cells of the rearrangement start [5]"),
    ("tol-fixed-point", "verify: fixed-point residual [1e-6]"),
    ("tol-location", "verify: location identity [0.05]"),
    ("tol-multiplier", "verify: multiplier identity [0.05]"),
    ("tol-weak", "verify: weak-form residual [0.02]"),
    ("tol-steiner", "verify: Steiner defect relative to the mass [1e-10]"),
    ("tol-bracket", "verify: allowed excess of E_eps over E0 [1e-3]"),
    ("from", "input directory (comma-separated list for report)"),
    ("out", "output directory [gsqg-out]"),
    ("seed", "seed of all randomness [0]"),
    ("threads", "worker threads [all cores]"),
];

const MODEL: &[&str] = &["s", "p", "L", "kappa"];
const SOLVER: &[&str] = &["tol", "max-iter", "damping", "anderson-depth"];
const COMMON: &[&str] = &["out", "seed", "threads"];

/// Subcommands with one-line descriptions and their flags.
pub fn commands() -> Vec<(&'static str, &'static str, Vec<&'static str>)> {
    let join = |parts: &[&[&'static str]]| parts.iter().flat_map(|p| p.iter().copied()).collect::<Vec<_>>();
    vec![
        ("solve-limiting", "radial ground state of the whole-plane problem", join(&[MODEL, &["nr"], SOLVER, COMMON])),
        (
            "solve-pair",
            "half-plane maximizers for each eps",
            join(&[MODEL, &["W", "eps", "n", "nr", "margin", "sym-every"], SOLVER, COMMON]),
        ),
        (
            "verify",
            "identity table of a solve-pair directory",
            join(&[
                &[
                    "from",
                    "tol-fixed-point",
                    "tol-location",
                    "tol-multiplier",
                    "tol-weak",
                    "tol-steiner",
                    "tol-bracket",
                ],
                COMMON,
            ]),
        ),
        (
            "evolve",
            "transport a stored pair, optionally perturbed",
            join(&[
                &[
                    "from",
                    "eps",
                    "dt",
                    "cfl",
                    "transits",
                    "perturb",
                    "delta",
                    "trials",
                    "trial-transits",
                    "diag-every",
                    "snapshot-every",
                ],
                COMMON,
            ]),
        ),
        (
            "rearrange",
            "rearrangement ascent from a shifted stored pair",
            join(&[&["from", "eps", "shift", "tol", "max-iter"], COMMON]),
        ),
        ("report", "collect the JSON reports of run directories", join(&[&["from"], COMMON])),
    ]
}

pub fn cli() -> Command {
    let help = |k: &str| KEYS.iter().find(|(n, _)| *n == k).map(|(_, h)| *h).unwrap_or("");
    let mut app = Command::new("gsqg")
        .about("Traveling vortex pairs for the generalized SQG equation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, keys) in commands() {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags win")
                .action(ArgAction::Set),
        );
        for k in keys {
            sub = sub.arg(Arg::new(k).long(k).value_name("VALUE").help(help(k)).action(ArgAction::Set));
        }
        app = app.subcommand(sub);
    }
    app
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, found '{line}'", k + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.iter().any(|(n, _)| *n == key) {
            return Err(CliError::Usage(format!("config line {}: unknown key '{key}'", k + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key '{key}'", k + 1)));
        }
    }
    Ok(out)
}

/// Perturbation applied before an evolution run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturb {
    None,
    Kind(PerturbationKind),
}

/// Validated settings of one invocation. Values absent from both the file
/// and the flags keep per-command defaults.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    pub s: Option<f64>,
    pub p: Option<f64>,
    pub l: f64,
    pub kappa: f64,
    pub w: f64,
    pub eps: Vec<f64>,
    pub n: usize,
    pub nr: usize,
    pub margin: f64,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub damping: f64,
    pub anderson_depth: usize,
    pub sym_every: usize,
    pub dt: Option<f64>,
    pub cfl: f64,
    pub transits: f64,
    pub perturb: Perturb,
    pub delta: f64,
    pub trials: usize,
    pub trial_transits: Option<f64>,
    pub diag_every: usize,
    pub snapshot_every: usize,
    pub shift: i64,
    pub tol_fixed_point: f64,
    pub tol_location: f64,
    pub tol_multiplier: f64,
    pub tol_weak: f64,
    pub tol_steiner: f64,
    pub tol_bracket: f64,
    pub from: Vec<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Merged key/value pairs as given, for the manifest.
    pub echo: BTreeMap<String, String>,
}

fn bad(key: &str, value: &str, want: &str) -> CliError {
    CliError::Usage(format!("{key} = '{value}': expected {want}"))
}

fn float(key: &str, v: &str) -> Result<f64, CliError> {
    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad(key, v, "a finite number"))
}

fn positive(key: &str, v: &str) -> Result<f64, CliError> {
    float(key, v).and_then(|x| if x > 0.0 { Ok(x) } else { Err(bad(key, v, "a positive number")) })
}

fn count(key: &str, v: &str) -> Result<usize, CliError> {
    v.parse::<usize>().map_err(|_| bad(key, v, "a non-negative integer"))
}

impl RunConfig {
    /// Validates a merged key map for `command`.
    pub fn from_map(command: &str, map: BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut c = RunConfig {
            command: command.to_string(),
            s: None,
            p: None,
            l: 0.12,
            kappa: 1.0,
            w: 1.0,
            eps: Vec::new(),
            n: 256,
            nr: 256,
            margin: 2.5,
            tol: None,
            max_iter: None,
            damping: 0.5,
            anderson_depth: 8,
            sym_every: 5,
            dt: None,
            cfl: 3.0,
            transits: 1.0,
            perturb: Perturb::None,
            delta: 0.2,
            trials: 0,
            trial_transits: None,
            diag_every: 10,
            snapshot_every: 0,
            shift: 5,
            tol_fixed_point: 1e-6,
            tol_location: 0.05,
            tol_multiplier: 0.05,
            tol_weak: 0.02,
            tol_steiner: 1e-10,
            tol_bracket: 1e-3,
            from: Vec::new(),
            out: PathBuf::from("gsqg-out"),
            seed: 0,
            threads: None,
            echo: map.clone(),
        };
        for (k, v) in &map {
            let v = v.as_str();
            match k.as_str() {
                "s" => {
                    let s = float(k, v)?;
                    if !(s > 0.0 && s < 1.0) {
                        return Err(bad(k, v, "a number in (0, 1)"));
                    }
                    c.s = Some(s);
                }
                "p" => c.p = Some(positive(k, v)?),
                "L" => c.l = positive(k, v)?,
                "kappa" => c.kappa = positive(k, v)?,
                "W" => c.w = positive(k, v)?,
                "eps" => {
                    c.eps = v.split(',').map(|e| positive(k, e.trim())).collect::<Result<_, _>>()?;
                }
                "n" => {
                    c.n = count(k, v)?;
                    if c.n < 16 {
                        return Err(bad(k, v, "at least 16 cells"));
                    }
                }
                "nr" => {
                    c.nr = count(k, v)?;
                    if c.nr < 16 {
                        return Err(bad(k, v, "at least 16 nodes"));
                    }
                }
                "margin" => {
                    c.margin = float(k, v)?;
                    if c.margin <= 1.0 {
                        return Err(bad(k, v, "a number above 1"));
                    }
                }
                "tol" => c.tol = Some(positive(k, v)?),
                "max-iter" => {
                    let m = count(k, v)?;
                    if m == 0 {
                        return Err(bad(k, v, "a positive integer"));
                    }
                    c.max_iter = Some(m);
                }
                "damping" => {
                    c.damping = float(k, v)?;
                    if !(c.damping > 0.0 && c.damping <= 1.0) {
                        return Err(bad(k, v, "a number in (0, 1]"));
                    }
                }
                "anderson-depth" => c.anderson_depth = count(k, v)?,
                "sym-every" => c.sym_every = count(k, v)?,
                "dt" => c.dt = Some(positive(k, v)?),
                "cfl" => c.cfl = positive(k, v)?,
                "transits" => c.transits = positive(k, v)?,
                "perturb" => {
                    c.perturb = match v {
                        "none" => Perturb::None,
                        "bump" => Perturb::Kind(PerturbationKind::Bump),
                        "shear" => Perturb::Kind(PerturbationKind::Shear),
                        "dimple" => Perturb::Kind(PerturbationKind::Dimple),
                        _ => return Err(bad(k, v, "one of none, bump, shear, dimple")),
                    }
                }
                "delta" => {
                    c.delta = float(k, v)?;
                    if !(c.delta > 0.0 && c.delta < 1.0) {
                        return Err(bad(k, v, "a number in (0, 1)"));
                    }
                }
                "trials" => c.trials = count(k, v)?,
                "trial-transits" => c.trial_transits = Some(positive(k, v)?),
                "diag-every" => {
                    c.diag_every = count(k, v)?;
                    if c.diag_every == 0 {
                        return Err(bad(k, v, "a positive integer"));
                    }
                }
                "snapshot-every" => c.snapshot_every = count(k, v)?,
                "shift" => c.shift = v.parse().map_err(|_| bad(k, v, "an integer"))?,
                "tol-fixed-point" => c.tol_fixed_point = positive(k, v)?,
                "tol-location" => c.tol_location = positive(k, v)?,
                "tol-multiplier" => c.tol_multiplier = positive(k, v)?,
                "tol-weak" => c.tol_weak = positive(k, v)?,
                "tol-steiner" => c.tol_steiner = positive(k, v)?,
                "tol-bracket" => c.tol_bracket = positive(k, v)?,
                "from" => c.from = v.split(',').map(|p| PathBuf::from(p.trim())).collect(),
                "out" => c.out = PathBuf::from(v),
                "seed" => c.seed = v.parse().map_err(|_| bad(k, v, "a non-negative integer"))?,
                "threads" => {
                    let t = count(k, v)?;
                    if t == 0 {
                        return Err(bad(k, v, "a positive integer"));
                    }
                    c.threads = Some(t);
                }
                _ => return Err(CliError::Usage(format!("unknown key '{k}'"))),
            }
        }
        c.check_command()?;
        Ok(c)
    }

    fn check_command(&self) -> Result<(), CliError> {
        let cmd = self.command.as_str();
        if matches!(cmd, "solve-limiting" | "solve-pair") {
            let s = self.s.ok_or_else(|| CliError::Usage(format!("{cmd} needs --s")))?;
            let p = self.p.ok_or_else(|| CliError::Usage(format!("{cmd} needs --p")))?;
            if p >= 1.0 / (1.0 - s) {
                return Err(CliError::Usage(format!("p = {p} violates p < 1/(1-s) = {}", 1.0 / (1.0 - s))));
            }
        }
        if cmd == "solve-pair" && self.eps.is_empty() {
            return Err(CliError::Usage("solve-pair needs --eps".into()));
        }
        if matches!(cmd, "verify" | "evolve" | "rearrange" | "report") {
            if self.from.is_empty() {
                return Err(CliError::Usage(format!("{cmd} needs --from")));
            }
            if cmd != "report" && self.from.len() > 1 {
                return Err(CliError::Usage(format!("{cmd} reads a single --from directory")));
            }
            if self.from.iter().any(|f| same_dir(f, &self.out)) {
                return Err(CliError::Usage("--out must differ from --from".into()));
            }
        }
        if cmd == "evolve" && self.trials > 0 && self.perturb != Perturb::None {
            return Err(CliError::Usage("--trials draws its own perturbations; drop --perturb".into()));
        }
        Ok(())
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn config_text_rejects_unknown_and_duplicate_keys() {
        let ok = parse_config_text("# model\ns = 0.5\np=1.5  # exponent\n\n").unwrap();
        assert_eq!(ok, map(&[("s", "0.5"), ("p", "1.5")]));
        let e = parse_config_text("s = 0.5\nfoo = 1\n").unwrap_err();
        assert_eq!(e.to_string(), "config line 2: unknown key 'foo'");
        assert!(parse_config_text("s = 0.5\ns = 0.4\n").unwrap_err().to_string().contains("duplicate"));
        assert!(parse_config_text("s 0.5\n").unwrap_err().to_string().contains("key = value"));
    }

    #[test]
    fn validation_cites_the_exponent_bound() {
        let e = RunConfig::from_map("solve-limiting", map(&[("s", "0.5"), ("p", "2.5")])).unwrap_err();
        assert!(e.to_string().contains("p < 1/(1-s)"), "{e}");
        let e = RunConfig::from_map("solve-limiting", map(&[("s", "0.5")])).unwrap_err();
        assert!(e.to_string().contains("--p"));
        assert!(RunConfig::from_map("solve-pair", map(&[("s", "0.5"), ("p", "1.5")])).is_err());
        let c = RunConfig::from_map("solve-pair", map(&[("s", "0.5"), ("p", "1.5"), ("eps", "0.2, 0.1")])).unwrap();
        assert_eq!(c.eps, vec![0.2, 0.1]);
    }

    #[test]
    fn values_are_checked_even_when_unused() {
        let e = RunConfig::from_map("report", map(&[("from", "a"), ("delta", "2")])).unwrap_err();
        assert!(e.to_string().contains("delta"));
        assert!(RunConfig::from_map("report", map(&[("from", "a"), ("n", "8")])).is_err());
        assert!(RunConfig::from_map("report", map(&[("from", "a"), ("perturb", "wiggle")])).is_err());
        assert!(RunConfig::from_map("report", map(&[("from", "a"), ("max-iter", "0")])).is_err());
    }

    #[test]
    fn every_flag_is_a_known_key() {
        for (_, _, keys) in commands() {
            for k in keys {
                assert!(KEYS.iter().any(|(n, _)| *n == k), "{k}");
            }
        }
        cli().debug_assert();
    }
}
