//! Roll-call loaders and emitters, run configuration and the result document.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapConfig;
use crate::error::{Error, Result};
use crate::jj_vem::JJVemConfig;
use crate::louis::LouisConfig;
use crate::model::{DropManifest, Estimator, FitResult, RollCall};
use crate::pg_vem::PGVemConfig;

pub const SCHEMA_VERSION: &str = "1";

/// Integer cast codes of a long-format file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoteCodeMap {
    pub yea_codes: BTreeSet<i64>,
    pub nay_codes: BTreeSet<i64>,
    pub missing_codes: BTreeSet<i64>,
}

impl Default for VoteCodeMap {
    /// Voteview convention.
    fn default() -> Self {
        Self {
            yea_codes: [1, 2, 3].into(),
            nay_codes: [4, 5, 6].into(),
            missing_codes: [0, 7, 8, 9].into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cast {
    Yea,
    Nay,
    Missing,
}

impl VoteCodeMap {
    pub fn validate(&self) -> Result<()> {
        let overlap = self
            .yea_codes
            .intersection(&self.nay_codes)
            .chain(self.yea_codes.intersection(&self.missing_codes))
            .chain(self.nay_codes.intersection(&self.missing_codes))
            .next();
        match overlap {
            Some(code) => Err(Error::InvalidConfig(format!("cast code {code} is in more than one set"))),
            None => Ok(()),
        }
    }

    pub fn classify(&self, code: i64) -> Option<Cast> {
        if self.yea_codes.contains(&code) {
            Some(Cast::Yea)
        } else if self.nay_codes.contains(&code) {
            Some(Cast::Nay)
        } else if self.missing_codes.contains(&code) {
            Some(Cast::Missing)
        } else {
            None
        }
    }
}

/// Input layout on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    #[default]
    Long,
    Matrix,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(Self::Long),
            "matrix" => Ok(Self::Matrix),
            _ => Err(Error::InvalidConfig(format!("unknown input format {s:?}"))),
        }
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers.iter().position(|h| names.contains(&h.trim()))
}

/// Index of `id` in `ids`, appending it on first sight.
fn intern(id: &str, ids: &mut Vec<String>, index: &mut HashMap<String, usize>) -> usize {
    if let Some(&k) = index.get(id) {
        return k;
    }
    ids.push(id.to_string());
    index.insert(id.to_string(), ids.len() - 1);
    ids.len() - 1
}

/// Loads a long-format file with columns `member_id` (or `icpsr`),
/// `bill_id` (or `rollnumber`) and `cast_code`. Legislators and bills keep
/// their order of first appearance; rows and columns without an observed
/// vote are dropped and listed in the manifest.
pub fn load_long_csv(path: &Path, codes: &VoteCodeMap) -> Result<(RollCall, DropManifest)> {
    codes.validate()?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let missing_column = |name: &str| parse_err(path, 1, format!("missing column {name}"));
    let c_member = column(&headers, &["member_id", "icpsr"]).ok_or_else(|| missing_column("member_id"))?;
    let c_bill = column(&headers, &["bill_id", "rollnumber"]).ok_or_else(|| missing_column("bill_id"))?;
    let c_cast = column(&headers, &["cast_code"]).ok_or_else(|| missing_column("cast_code"))?;

    let (mut members, mut member_index) = (Vec::new(), HashMap::new());
    let (mut bills, mut bill_index) = (Vec::new(), HashMap::new());
    let mut cells: HashMap<(usize, usize), Cast> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(c).ok_or_else(|| parse_err(path, line, "short record"));
        let member = field(c_member)?;
        let bill = field(c_bill)?;
        let raw = field(c_cast)?;
        let code: i64 = raw
            .parse()
            .map_err(|_| parse_err(path, line, format!("cast code {raw:?} is not an integer")))?;
        let cast = codes
            .classify(code)
            .ok_or_else(|| parse_err(path, line, format!("unknown cast code {code}")))?;
        let i = intern(member, &mut members, &mut member_index);
        let j = intern(bill, &mut bills, &mut bill_index);
        if cells.insert((i, j), cast).is_some() {
            return Err(parse_err(path, line, format!("duplicate vote for member {member} on bill {bill}")));
        }
    }
    if members.is_empty() {
        return Err(Error::InvalidData(format!("{}: no votes", path.display())));
    }
    let shape = (members.len(), bills.len());
    let mut votes = Array2::zeros(shape);
    let mut observed = Array2::from_elem(shape, false);
    for (&(i, j), cast) in &cells {
        match cast {
            Cast::Yea => {
                votes[[i, j]] = 1;
                observed[[i, j]] = true;
            }
            Cast::Nay => observed[[i, j]] = true,
            Cast::Missing => {}
        }
    }
    RollCall::new_dropping_empty(votes, observed, members, bills)
}

/// Loads a dense file: header row of bill ids after a leading label cell,
/// one row per legislator with the id first and cells `1`, `0`, `NA` or empty.
pub fn load_matrix_csv(path: &Path) -> Result<(RollCall, DropManifest)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(parse_err(path, 1, "header needs a label cell and at least one bill id"));
    }
    let bills: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut members = Vec::new();
    let mut votes = Vec::new();
    let mut observed = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        members.push(record[0].to_string());
        for cell in record.iter().skip(1) {
            let (y, o) = match cell {
                "1" => (1, true),
                "0" => (0, true),
                "" | "NA" => (0, false),
                other => return Err(parse_err(path, line, format!("cell {other:?} is not 0, 1 or NA"))),
            };
            votes.push(y);
            observed.push(o);
        }
    }
    if members.is_empty() {
        return Err(Error::InvalidData(format!("{}: no legislators", path.display())));
    }
    let shape = (members.len(), bills.len());
    let votes = Array2::from_shape_vec(shape, votes).map_err(|e| Error::Dimension(e.to_string()))?;
    let observed = Array2::from_shape_vec(shape, observed).map_err(|e| Error::Dimension(e.to_string()))?;
    RollCall::new_dropping_empty(votes, observed, members, bills)
}

pub fn load_rollcall(path: &Path, format: InputFormat, codes: &VoteCodeMap) -> Result<(RollCall, DropManifest)> {
    match format {
        InputFormat::Long => load_long_csv(path, codes),
        InputFormat::Matrix => load_matrix_csv(path),
    }
}

/// Writes every cell in row-major order with codes 1 (yea), 6 (nay) and
/// 9 (missing).
pub fn write_long_csv(path: &Path, data: &RollCall) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["member_id", "bill_id", "cast_code"])?;
    for (i, member) in data.legislator_ids().iter().enumerate() {
        for (j, bill) in data.bill_ids().iter().enumerate() {
            let code = match (data.observed()[[i, j]], data.votes()[[i, j]]) {
                (false, _) => "9",
                (true, 1) => "1",
                (true, _) => "6",
            };
            w.write_record([member.as_str(), bill.as_str(), code])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, data: &RollCall) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["member_id"];
    header.extend(data.bill_ids().iter().map(String::as_str));
    w.write_record(&header)?;
    for (i, member) in data.legislator_ids().iter().enumerate() {
        let mut row = vec![member.as_str()];
        for j in 0..data.n_bills() {
            row.push(match (data.observed()[[i, j]], data.votes()[[i, j]]) {
                (false, _) => "NA",
                (true, 1) => "1",
                (true, _) => "0",
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything that determines a result besides the input data. Echoed into
/// every result document; worker count is deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub estimator: Estimator,
    pub seed: u64,
    pub pg: PGVemConfig,
    pub jj: JJVemConfig,
    pub louis: LouisConfig,
    pub bootstrap: BootstrapConfig,
    pub codes: VoteCodeMap,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::PgVem,
            seed: 0,
            pg: PGVemConfig::default(),
            jj: JJVemConfig::default(),
            louis: LouisConfig::default(),
            bootstrap: BootstrapConfig::default(),
            codes: VoteCodeMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEntry {
    pub estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_louis: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_bootstrap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFlags {
    pub fit_converged: bool,
    pub cavi_capped_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap_dropped_replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocDiagnostics {
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    /// Only present when timing output was requested; keeps documents
    /// byte-stable otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    pub dropped_rows: Vec<String>,
    pub dropped_cols: Vec<String>,
    pub convergence_flags: ConvergenceFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: String,
    pub estimator: Estimator,
    pub theta: BTreeMap<String, ThetaEntry>,
    pub sigma_beta: [[f64; 2]; 2],
    pub diagnostics: DocDiagnostics,
    pub config_echo: RunConfig,
}

impl ResultDocument {
    pub fn from_fit(fit: &FitResult, data: &RollCall, manifest: &DropManifest, config: &RunConfig) -> Result<Self> {
        if fit.params.theta.len() != data.n_legislators() {
            return Err(Error::Dimension("fit does not match the data".into()));
        }
        let theta = data
            .legislator_ids()
            .iter()
            .zip(&fit.params.theta)
            .map(|(id, &estimate)| {
                (
                    id.clone(),
                    ThetaEntry {
                        estimate,
                        se_louis: None,
                        se_bootstrap: None,
                    },
                )
            })
            .collect::<BTreeMap<_, _>>();
        if theta.len() != data.n_legislators() {
            return Err(Error::InvalidData("legislator ids are not unique".into()));
        }
        let s = fit.params.nu;
        Ok(Self {
            schema_version: SCHEMA_VERSION.into(),
            estimator: fit.estimator,
            theta,
            sigma_beta: [[s.a11, s.a12], [s.a12, s.a22]],
            diagnostics: DocDiagnostics {
                elbo_trace: fit.elbo_trace.clone(),
                iterations: fit.outer_iters,
                wall_time_ms: None,
                dropped_rows: manifest.legislators.clone(),
                dropped_cols: manifest.bills.clone(),
                convergence_flags: ConvergenceFlags {
                    fit_converged: fit.converged(),
                    cavi_capped_iterations: fit.diagnostics.cavi_capped,
                    bootstrap_dropped_replicates: None,
                },
            },
            config_echo: config.clone(),
        })
    }

    /// Attaches SEs given in the data's legislator order.
    pub fn set_se_louis(&mut self, ids: &[String], se: &[Option<f64>]) -> Result<()> {
        self.attach(ids, se.len(), |entry, k| entry.se_louis = se[k])
    }

    pub fn set_se_bootstrap(&mut self, ids: &[String], se: &[f64], dropped: usize) -> Result<()> {
        self.diagnostics.convergence_flags.bootstrap_dropped_replicates = Some(dropped);
        self.attach(ids, se.len(), |entry, k| entry.se_bootstrap = Some(se[k]))
    }

    fn attach(&mut self, ids: &[String], n: usize, mut set: impl FnMut(&mut ThetaEntry, usize)) -> Result<()> {
        if ids.len() != n {
            return Err(Error::Dimension(format!("{} ids for {} standard errors", ids.len(), n)));
        }
        for (k, id) in ids.iter().enumerate() {
            let entry = self
                .theta
                .get_mut(id)
                .ok_or_else(|| Error::InvalidData(format!("legislator {id} is not in the document")))?;
            set(entry, k);
        }
        Ok(())
    }
}

/// Pretty JSON with every float written as `{:.16e}` (17 significant digits).
struct FullPrecision<'a>(serde_json::ser::PrettyFormatter<'a>);

impl serde_json::ser::Formatter for FullPrecision<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes to the canonical text form.
pub fn result_to_string(doc: &ResultDocument) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision(Default::default()));
    doc.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_result(path: &Path, doc: &ResultDocument) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(result_to_string(doc)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_result(path: &Path) -> Result<ResultDocument> {
    let doc: ResultDocument = serde_json::from_reader(io::BufReader::new(File::open(path)?))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidData(format!(
            "unsupported schema_version {:?}",
            doc.schema_version
        )));
    }
    Ok(doc)
}
