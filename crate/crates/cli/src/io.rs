//! Delimited-text readers and writers for cohorts, panels, surfaces and
//! test records.

use std::collections::HashSet;
use std::io::{Read, Write};

use thiserror::Error;

use vetrial_core::cohort::{validate_record, CohortError, DoseWeek, Panel, ParticipantRecord, ProtocolConfig};
use vetrial_core::mestimation::TehResult;
use vetrial_core::msm::VESurface;

use crate::config::TehAlternative;

/// Fixed leading columns of a cohort file; anything after them is a covariate.
pub const COHORT_COLUMNS: [&str; 8] = ["id", "t_star", "delta", "s", "s_star", "v1", "v2", "v3"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {source}")]
    Csv { line: u64, source: csv::Error },
    #[error("header: {0}")]
    Header(String),
    #[error("line {line}, column `{column}`: {message}")]
    Field { line: u64, column: String, message: String },
    #[error("line {line}: {source}")]
    Invalid { line: u64, source: CohortError },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: u64, id: String },
    #[error(transparent)]
    Write(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads a cohort. Empty dose cells mean the dose was never given. Returns
/// the records and the covariate column names in file order.
pub fn load_cohort<R: Read>(reader: R, protocol: &ProtocolConfig) -> Result<(Vec<ParticipantRecord>, Vec<String>), IoError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|source| IoError::Csv { line: 1, source })?.clone();
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    for (i, want) in COHORT_COLUMNS.iter().enumerate() {
        if names.get(i).map(String::as_str) != Some(*want) {
            return Err(IoError::Header(format!(
                "column {} must be `{want}`, found {:?}; expected {}",
                i + 1,
                names.get(i).map(String::as_str).unwrap_or(""),
                COHORT_COLUMNS.join(",")
            )));
        }
    }
    let covariates = names[COHORT_COLUMNS.len()..].to_vec();
    if let Some(dup) = covariates.iter().enumerate().find(|(i, c)| covariates[..*i].contains(c)) {
        return Err(IoError::Header(format!("covariate `{}` appears twice", dup.1)));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|source| {
            let line = source.position().map_or(0, |p| p.line());
            IoError::Csv { line, source }
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() < names.len() {
            return Err(IoError::Field {
                line,
                column: names[row.len()].clone(),
                message: format!("missing; expected {} fields, found {}", names.len(), row.len()),
            });
        }
        if let Some(extra) = row.iter().skip(names.len()).position(|f| !f.is_empty()) {
            return Err(IoError::Field {
                line,
                column: format!("#{}", names.len() + extra + 1),
                message: "unexpected value past the last header column".into(),
            });
        }
        let field = |c: usize| &row[c];
        let bad = |c: usize, message: String| IoError::Field { line, column: names[c].clone(), message };
        let uint = |c: usize| field(c).parse::<u32>().map_err(|_| bad(c, format!("expected a week number, found {:?}", field(c))));
        let dose = |c: usize| -> Result<DoseWeek, IoError> {
            if field(c).is_empty() {
                Ok(DoseWeek::Never)
            } else {
                uint(c).map(DoseWeek::Week)
            }
        };
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(bad(0, "empty id".into()));
        }
        let delta = match field(2) {
            "0" => false,
            "1" => true,
            other => return Err(bad(2, format!("expected 0 or 1, found {other:?}"))),
        };
        let x = (COHORT_COLUMNS.len()..names.len())
            .map(|c| {
                let v: f64 = field(c).parse().map_err(|_| bad(c, format!("expected a number, found {:?}", field(c))))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(c, "value is not finite".into()))
                }
            })
            .collect::<Result<Vec<f64>, IoError>>()?;
        let rec = ParticipantRecord {
            id,
            t_star: uint(1)?,
            delta,
            s: uint(3)?,
            s_star: uint(4)?,
            doses: [dose(5)?, dose(6)?, dose(7)?],
            x,
        };
        validate_record(&rec, protocol).map_err(|source| IoError::Invalid { line, source })?;
        if !seen.insert(rec.id.clone()) {
            return Err(IoError::DuplicateId { line, id: rec.id });
        }
        records.push(rec);
    }
    Ok((records, covariates))
}

pub fn write_cohort<W: Write>(writer: W, records: &[ParticipantRecord], covariates: &[String]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COHORT_COLUMNS.iter().copied().chain(covariates.iter().map(String::as_str)))?;
    for r in records {
        let mut fields = vec![
            r.id.clone(),
            r.t_star.to_string(),
            u8::from(r.delta).to_string(),
            r.s.to_string(),
            r.s_star.to_string(),
        ];
        fields.extend(r.doses.iter().map(|d| d.to_string()));
        fields.extend(r.x.iter().map(|v| v.to_string()));
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel<W: Write>(writer: W, panel: &Panel) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "j", "k", "z", "r", "y", "at_risk", "weight"])?;
    let bit = |b: bool| if b { "1" } else { "0" };
    for row in &panel.rows {
        w.write_record([
            panel.ids[row.person as usize].as_str(),
            &row.j.to_string(),
            &row.k.to_string(),
            bit(row.z),
            bit(row.r),
            bit(row.y),
            bit(row.at_risk),
            &row.weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per grid cell: `j,k,ve,log_rr,se_log_rr,ci_lo,ci_hi`.
pub fn write_surface<W: Write>(writer: W, surface: &VESurface) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["j", "k", "ve", "log_rr", "se_log_rr", "ci_lo", "ci_hi"])?;
    for c in &surface.cells {
        w.write_record([
            c.j.to_string(),
            c.k.to_string(),
            c.ve.to_string(),
            c.log_rr.to_string(),
            opt(c.se_log_rr),
            opt(c.ci.map(|ci| ci.0)),
            opt(c.ci.map(|ci| ci.1)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format for plotting VE against calendar week, one row per cell and
/// quantity.
pub fn write_surface_long<W: Write>(writer: W, surface: &VESurface) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["j", "k", "calendar_week", "quantity", "value"])?;
    for c in &surface.cells {
        let week = (c.j + c.k).to_string();
        let rows = [("ve", Some(c.ve)), ("ci_lo", c.ci.map(|v| v.0)), ("ci_hi", c.ci.map(|v| v.1))];
        for (q, v) in rows {
            if let Some(v) = v {
                w.write_record([c.j.to_string(), c.k.to_string(), week.clone(), q.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Whether the test rejects homogeneity at level `gamma`.
pub fn teh_rejects(teh: &TehResult, alternative: TehAlternative, gamma: f64) -> bool {
    match alternative {
        TehAlternative::OneSided => teh.p_one_sided < gamma,
        TehAlternative::TwoSided => teh.p_two_sided < gamma,
    }
}

pub fn write_teh<W: Write>(writer: W, teh: &TehResult, alternative: TehAlternative, gamma: f64) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["beta", "se", "u", "p_one_sided", "p_two_sided", "k_max", "alternative", "reject"])?;
    w.write_record([
        teh.beta.to_string(),
        teh.se_beta.to_string(),
        teh.u_beta.to_string(),
        teh.p_one_sided.to_string(),
        teh.p_two_sided.to_string(),
        teh.k_max.to_string(),
        match alternative {
            TehAlternative::OneSided => "one-sided".into(),
            TehAlternative::TwoSided => "two-sided".into(),
        },
        u8::from(teh_rejects(teh, alternative, gamma)).to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
