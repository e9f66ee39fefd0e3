//! CSV ingestion and design-matrix construction.
//!
//! Respondent files carry integer `y` and `r` columns, numeric or string
//! covariate columns, and an optional weight column. Categorical columns
//! expand to reference-coded indicators: the first level observed in the
//! respondent file is the reference, and the expansion is recorded in a
//! codebook that strata files must expand through, so the two designs
//! always align. Strata files carry a `share` column plus the same raw
//! covariate columns.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{RespondentRecord, Stratum};

/// Covariate columns for one equation, split by how they enter the design.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovariateSpec {
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
}

/// Column mapping for respondent ingestion.
#[derive(Debug, Clone)]
pub struct ColumnMapping {
    pub y: String,
    pub r: String,
    pub weight: Option<String>,
    pub outcome: CovariateSpec,
    pub response: CovariateSpec,
    pub include_intercepts: bool,
    /// Declared category counts; inferred from the data when absent.
    pub y_categories: Option<usize>,
    pub r_categories: Option<usize>,
}

/// Reference-coded expansion of one categorical column; `levels[0]` is the
/// reference, each later level owns one indicator column.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CategoricalExpansion {
    pub column: String,
    pub levels: Vec<String>,
}

/// Layout of one equation's design vector, in column order: optional
/// intercept, numeric columns, then indicator blocks.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DesignLayout {
    pub intercept: bool,
    pub numeric: Vec<String>,
    pub categorical: Vec<CategoricalExpansion>,
}

impl DesignLayout {
    pub fn dim(&self) -> usize {
        usize::from(self.intercept)
            + self.numeric.len()
            + self.categorical.iter().map(|c| c.levels.len().saturating_sub(1)).sum::<usize>()
    }

    /// Human-readable design column labels.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        if self.intercept {
            names.push("(intercept)".to_string());
        }
        names.extend(self.numeric.iter().cloned());
        for cat in &self.categorical {
            for level in &cat.levels[1..] {
                names.push(format!("{}={}", cat.column, level));
            }
        }
        names
    }
}

/// Everything needed to reproduce the design expansion: both layouts and
/// the category counts in force.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Codebook {
    pub outcome: DesignLayout,
    pub response: DesignLayout,
    pub y_categories: usize,
    pub r_categories: usize,
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("column '{name}' not found in header")))
}

fn parse_category(field: &str, column: &str, row: usize) -> Result<usize> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Err(Error::Data(format!("row {row}: missing {column}")));
    }
    match trimmed.parse::<i64>() {
        Ok(v) if v >= 1 => Ok(v as usize),
        _ => Err(Error::Data(format!(
            "row {row}: {column}='{trimmed}' is not a positive integer category code"
        ))),
    }
}

fn parse_numeric(field: &str, column: &str, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Data(format!("row {row}: column '{column}' value '{field}' is not numeric"))
    })
}

struct LevelCollector {
    /// per categorical column: levels in first-observed order
    levels: Vec<Vec<String>>,
    index: Vec<HashMap<String, usize>>,
}

impl LevelCollector {
    fn new(n: usize) -> Self {
        Self { levels: vec![Vec::new(); n], index: vec![HashMap::new(); n] }
    }

    fn observe(&mut self, col: usize, value: &str) {
        if !self.index[col].contains_key(value) {
            self.index[col].insert(value.to_string(), self.levels[col].len());
            self.levels[col].push(value.to_string());
        }
    }
}

/// Expand one raw row into a design vector given a layout. `lookup` maps a
/// column name to the row's raw string.
fn expand_design(
    layout: &DesignLayout,
    lookup: &dyn Fn(&str) -> String,
    row: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(layout.dim());
    if layout.intercept {
        out.push(1.0);
    }
    for name in &layout.numeric {
        out.push(parse_numeric(&lookup(name), name, row)?);
    }
    for cat in &layout.categorical {
        let raw = lookup(&cat.column);
        let value = raw.trim();
        let pos = cat.levels.iter().position(|l| l == value).ok_or_else(|| {
            Error::Data(format!(
                "row {row}: unidentified level '{value}' in column '{}' (levels seen in \
                 respondents: {:?})",
                cat.column, cat.levels
            ))
        })?;
        for k in 1..cat.levels.len() {
            out.push(if k == pos { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// Load and expand a respondent CSV. Categorical levels are collected in
/// first-observed order (first level = reference); `y` and `r` must be
/// integer codes starting at 1, consecutive when category counts are
/// inferred and within range when they are declared.
pub fn load_respondents(
    path: &Path,
    mapping: &ColumnMapping,
) -> Result<(Vec<RespondentRecord>, Codebook)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }

    let y_idx = header_index(&headers, &mapping.y)?;
    let r_idx = header_index(&headers, &mapping.r)?;
    let weight_idx = mapping.weight.as_ref().map(|w| header_index(&headers, w)).transpose()?;

    // resolve all referenced covariate columns up front
    let mut col_index: HashMap<String, usize> = HashMap::new();
    for name in mapping
        .outcome
        .numeric
        .iter()
        .chain(&mapping.outcome.categorical)
        .chain(&mapping.response.numeric)
        .chain(&mapping.response.categorical)
    {
        col_index.insert(name.clone(), header_index(&headers, name)?);
    }

    let rows: Vec<csv::StringRecord> =
        reader.records().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    // pass 1: category parsing and categorical level collection
    let cat_columns: Vec<String> = {
        let mut cols = mapping.outcome.categorical.clone();
        for c in &mapping.response.categorical {
            if !cols.contains(c) {
                cols.push(c.clone());
            }
        }
        cols
    };
    let mut collector = LevelCollector::new(cat_columns.len());
    let mut ys = Vec::with_capacity(rows.len());
    let mut rs = Vec::with_capacity(rows.len());
    for (i, record) in rows.iter().enumerate() {
        let row = i + 2; // 1-based with header
        let y = parse_category(record.get(y_idx).unwrap_or(""), &mapping.y, row)?;
        let r = parse_category(record.get(r_idx).unwrap_or(""), &mapping.r, row)?;
        if let Some(limit) = mapping.y_categories {
            if y > limit {
                return Err(Error::Data(format!(
                    "row {row}: y={y} exceeds declared y_categories={limit}"
                )));
            }
        }
        if let Some(limit) = mapping.r_categories {
            if r > limit {
                return Err(Error::Data(format!(
                    "row {row}: r={r} exceeds declared r_categories={limit}"
                )));
            }
        }
        ys.push(y);
        rs.push(r);
        for (c, name) in cat_columns.iter().enumerate() {
            collector.observe(c, rows[i].get(col_index[name]).unwrap_or("").trim());
        }
    }

    let infer_categories = |observed: &[usize], declared: Option<usize>, what: &str| -> Result<usize> {
        match declared {
            Some(n) => Ok(n),
            None => {
                let max = *observed.iter().max().expect("nonempty");
                let mut seen = vec![false; max];
                for &v in observed {
                    seen[v - 1] = true;
                }
                let missing: Vec<usize> =
                    (1..=max).filter(|&c| !seen[c - 1]).collect();
                if !missing.is_empty() {
                    return Err(Error::Data(format!(
                        "non-consecutive {what} category codes: {missing:?} unobserved below \
                         the maximum {max}"
                    )));
                }
                Ok(max)
            }
        }
    };
    let y_categories = infer_categories(&ys, mapping.y_categories, "y")?;
    let r_categories = infer_categories(&rs, mapping.r_categories, "r")?;

    let expansion_for = |name: &str| -> CategoricalExpansion {
        let c = cat_columns.iter().position(|n| n == name).expect("collected");
        CategoricalExpansion { column: name.to_string(), levels: collector.levels[c].clone() }
    };
    let codebook = Codebook {
        outcome: DesignLayout {
            intercept: mapping.include_intercepts,
            numeric: mapping.outcome.numeric.clone(),
            categorical: mapping.outcome.categorical.iter().map(|n| expansion_for(n)).collect(),
        },
        response: DesignLayout {
            intercept: mapping.include_intercepts,
            numeric: mapping.response.numeric.clone(),
            categorical: mapping.response.categorical.iter().map(|n| expansion_for(n)).collect(),
        },
        y_categories,
        r_categories,
    };

    // pass 2: design expansion
    let mut records = Vec::with_capacity(rows.len());
    for (i, record) in rows.iter().enumerate() {
        let row = i + 2;
        let lookup = |name: &str| record.get(col_index[name]).unwrap_or("").to_string();
        let x = expand_design(&codebook.outcome, &lookup, row)?;
        let z = expand_design(&codebook.response, &lookup, row)?;
        let weight = match weight_idx {
            None => 1.0,
            Some(w) => {
                let field = record.get(w).unwrap_or("");
                if field.trim().is_empty() {
                    1.0
                } else {
                    let parsed = parse_numeric(field, mapping.weight.as_ref().unwrap(), row)?;
                    if parsed < 0.0 {
                        return Err(Error::Data(format!("row {row}: negative weight {parsed}")));
                    }
                    parsed
                }
            }
        };
        records.push(RespondentRecord { y: ys[i], r: rs[i], x, z, weight });
    }
    Ok((records, codebook))
}

/// Load a strata CSV (share column plus raw covariates) and expand it
/// through the respondent codebook. Share sums inside `[0.999, 1.001]`
/// renormalize with a warning; anything further off is an error.
pub fn load_strata(path: &Path, codebook: &Codebook) -> Result<(Vec<Stratum>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let share_idx = header_index(&headers, "share")?;
    let id_idx = headers.iter().position(|h| h == "stratum" || h == "id");

    let mut col_index: HashMap<String, usize> = HashMap::new();
    for layout in [&codebook.outcome, &codebook.response] {
        for name in
            layout.numeric.iter().chain(layout.categorical.iter().map(|c| &c.column))
        {
            col_index.entry(name.clone()).or_insert(header_index(&headers, name)?);
        }
    }

    let mut strata = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let share = parse_numeric(record.get(share_idx).unwrap_or(""), "share", row)?;
        if !(share > 0.0) || !share.is_finite() {
            return Err(Error::Data(format!("row {row}: share {share} must be positive")));
        }
        let lookup = |name: &str| record.get(col_index[name]).unwrap_or("").to_string();
        let x = expand_design(&codebook.outcome, &lookup, row)?;
        let z = expand_design(&codebook.response, &lookup, row)?;
        let id = match id_idx {
            Some(idx) => record.get(idx).unwrap_or("").trim().to_string(),
            None => format!("stratum-{}", i + 1),
        };
        strata.push(Stratum { id, x, z, share });
    }
    if strata.is_empty() {
        return Err(Error::Data(format!("{}: no strata rows", path.display())));
    }

    let mut warnings = Vec::new();
    let total: f64 = strata.iter().map(|s| s.share).sum();
    if (total - 1.0).abs() <= 1e-9 {
        // exact enough
    } else if (0.999..=1.001).contains(&total) {
        warnings.push(format!("strata shares sum {total}; renormalizing to 1"));
        for s in &mut strata {
            s.share /= total;
        }
    } else {
        return Err(Error::Data(format!("strata shares sum {total} != 1")));
    }
    Ok((strata, warnings))
}

/// Write respondent records to the ingestion CSV schema:
/// `y,r,weight,x1..,z1..`. Numbers serialize in shortest-roundtrip form,
/// so a reload reproduces the records exactly.
pub fn respondents_to_csv(records: &[RespondentRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let (dx, dz) = match records.first() {
        Some(r) => (r.x.len(), r.z.len()),
        None => return Err(Error::Data("no records to serialize".into())),
    };
    let mut header = vec!["y".to_string(), "r".to_string(), "weight".to_string()];
    header.extend((1..=dx).map(|i| format!("x{i}")));
    header.extend((1..=dz).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for rec in records {
        let mut row = vec![rec.y.to_string(), rec.r.to_string(), rec.weight.to_string()];
        row.extend(rec.x.iter().map(|v| v.to_string()));
        row.extend(rec.z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Internal(format!("csv flush: {e}")))
}

/// Write strata to the ingestion CSV schema: `stratum,share,x1..,z1..`.
pub fn strata_to_csv(strata: &[Stratum]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let (dx, dz) = match strata.first() {
        Some(s) => (s.x.len(), s.z.len()),
        None => return Err(Error::Data("no strata to serialize".into())),
    };
    let mut header = vec!["stratum".to_string(), "share".to_string()];
    header.extend((1..=dx).map(|i| format!("x{i}")));
    header.extend((1..=dz).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for s in strata {
        let mut row = vec![s.id.clone(), s.share.to_string()];
        row.extend(s.x.iter().map(|v| v.to_string()));
        row.extend(s.z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Internal(format!("csv flush: {e}")))
}

/// Column mapping matching [`respondents_to_csv`] output: numeric `x*`/`z*`
/// columns, no intercept prepended (simulated designs already carry one).
pub fn simulated_mapping(dx: usize, dz: usize) -> ColumnMapping {
    ColumnMapping {
        y: "y".into(),
        r: "r".into(),
        weight: Some("weight".into()),
        outcome: CovariateSpec {
            numeric: (1..=dx).map(|i| format!("x{i}")).collect(),
            categorical: vec![],
        },
        response: CovariateSpec {
            numeric: (1..=dz).map(|i| format!("z{i}")).collect(),
            categorical: vec![],
        },
        include_intercepts: false,
        y_categories: None,
        r_categories: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn basic_mapping() -> ColumnMapping {
        ColumnMapping {
            y: "y".into(),
            r: "r".into(),
            weight: None,
            outcome: CovariateSpec {
                numeric: vec!["age".into()],
                categorical: vec!["education".into()],
            },
            response: CovariateSpec {
                numeric: vec![],
                categorical: vec!["education".into()],
            },
            include_intercepts: true,
            y_categories: None,
            r_categories: None,
        }
    }

    #[test]
    fn categorical_reference_coding() {
        let f = write_temp("y,r,age,education\n1,1,30,A\n2,2,40,B\n1,2,50,A\n");
        let (records, codebook) = load_respondents(f.path(), &basic_mapping()).unwrap();
        assert_eq!(records.len(), 3);
        // x = [intercept, age, education=B]
        assert_eq!(codebook.outcome.dim(), 3);
        assert_eq!(
            codebook.outcome.column_names(),
            vec!["(intercept)", "age", "education=B"]
        );
        assert_eq!(records[0].x, vec![1.0, 30.0, 0.0]);
        assert_eq!(records[1].x, vec![1.0, 40.0, 1.0]);
        // z = [intercept, education=B]
        assert_eq!(records[1].z, vec![1.0, 1.0]);
        assert_eq!(codebook.y_categories, 2);
        assert_eq!(codebook.r_categories, 2);
    }

    #[test]
    fn declared_range_violation_names_row() {
        let f = write_temp("y,r,age,education\n1,1,30,A\n2,9,40,B\n");
        let mut mapping = basic_mapping();
        mapping.r_categories = Some(7);
        let err = load_respondents(f.path(), &mapping).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}");
        assert!(msg.contains("r=9"), "{msg}");
    }

    #[test]
    fn missing_y_names_row() {
        let f = write_temp("y,r,age,education\n1,1,30,A\n,2,40,B\n");
        let err = load_respondents(f.path(), &basic_mapping()).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn nonconsecutive_codes_rejected_when_inferring() {
        let f = write_temp("y,r,age,education\n1,1,30,A\n3,2,40,B\n");
        let err = load_respondents(f.path(), &basic_mapping()).unwrap_err();
        assert!(err.to_string().contains("non-consecutive"), "{err}");
    }

    #[test]
    fn strata_expansion_and_share_policy() {
        let rf = write_temp("y,r,age,education\n1,1,30,A\n2,2,40,B\n");
        let (_, codebook) = load_respondents(rf.path(), &basic_mapping()).unwrap();

        // mild share drift renormalizes with a warning
        let sf = write_temp("stratum,share,age,education\ns1,0.6003,35,A\ns2,0.4002,45,B\n");
        let (strata, warnings) = load_strata(sf.path(), &codebook).unwrap();
        assert_eq!(warnings.len(), 1);
        let total: f64 = strata.iter().map(|s| s.share).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(strata[1].x, vec![1.0, 45.0, 1.0]);

        // large drift errors
        let sf = write_temp("stratum,share,age,education\ns1,0.5,35,A\ns2,0.4,45,B\n");
        let err = load_strata(sf.path(), &codebook).unwrap_err();
        assert!(err.to_string().contains("shares sum"), "{err}");

        // unknown level errors
        let sf = write_temp("stratum,share,age,education\ns1,0.5,35,A\ns2,0.5,45,C\n");
        let err = load_strata(sf.path(), &codebook).unwrap_err();
        assert!(err.to_string().contains("unidentified level"), "{err}");
    }

    #[test]
    fn simulated_csv_roundtrip() {
        let records = vec![
            RespondentRecord::new(1, 2, vec![1.0, 0.25], vec![1.0, -0.75]),
            RespondentRecord::new(2, 1, vec![1.0, -1.5], vec![1.0, 0.3333333333333333]),
        ];
        let bytes = respondents_to_csv(&records).unwrap();
        let f = write_temp(std::str::from_utf8(&bytes).unwrap());
        let mapping = simulated_mapping(2, 2);
        let (loaded, _) = load_respondents(f.path(), &mapping).unwrap();
        assert_eq!(loaded, records);
    }
}
