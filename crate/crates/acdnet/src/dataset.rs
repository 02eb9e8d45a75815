//! Line-delimited JSON dataset files.
//!
//! A file is a header line, one line per patient, two graph lines (`ehr`,
//! `ddi`) and one molecule line per medication:
//!
//! ```text
//! {"kind":"header","format":"acdnet-ehr","version":1,"vocab":{...},"atom_vocab":8,"patients":600,...}
//! {"kind":"patient","id":"p0000","visits":[{"diagnoses":[3,9],"procedures":[1],"medications":[0,4]}]}
//! {"kind":"graph","name":"ehr","edges":[[0,4],[1,2]]}
//! {"kind":"graph","name":"ddi","edges":[[0,7]]}
//! {"kind":"molecule","medication":0,"atoms":3,"atom_types":[0,2,1],"bonds":[[0,1],[1,2]]}
//! ```
//!
//! All indices are 0-based. Readers report the 1-based line of any problem.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use acdnet_core::ehr::{Adjacency, Dataset, GenConfig, KnowledgeGraphs, Molecule, PatientRecord, Visit, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::FormatError;

pub const FORMAT: &str = "acdnet-ehr";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub vocab: Vocab,
    pub atom_vocab: usize,
    pub patients: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitLine {
    pub diagnoses: Vec<usize>,
    pub procedures: Vec<usize>,
    #[serde(default)]
    pub medications: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientLine {
    pub id: String,
    pub visits: Vec<VisitLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphLine {
    pub name: String,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeLine {
    pub medication: usize,
    pub atoms: usize,
    pub atom_types: Vec<usize>,
    pub bonds: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Line {
    Header(Header),
    Patient(PatientLine),
    Graph(GraphLine),
    Molecule(MoleculeLine),
}

impl From<&Visit> for VisitLine {
    fn from(v: &Visit) -> Self {
        Self {
            diagnoses: v.diagnoses.iter().copied().collect(),
            procedures: v.procedures.iter().copied().collect(),
            medications: v.medications.iter().copied().collect(),
        }
    }
}

impl From<&PatientRecord> for PatientLine {
    fn from(r: &PatientRecord) -> Self {
        Self {
            id: r.patient_id.clone(),
            visits: r.visits.iter().map(VisitLine::from).collect(),
        }
    }
}

fn unique(line: usize, field: &str, codes: &[usize]) -> Result<BTreeSet<usize>, FormatError> {
    let set: BTreeSet<usize> = codes.iter().copied().collect();
    if set.len() != codes.len() {
        return Err(FormatError::at(line, field, "duplicate code"));
    }
    Ok(set)
}

impl PatientLine {
    fn into_record(self, line: usize, vocab: Option<&Vocab>) -> Result<PatientRecord, FormatError> {
        let mut visits = Vec::with_capacity(self.visits.len());
        for (t, v) in self.visits.into_iter().enumerate() {
            let visit = Visit {
                diagnoses: unique(line, &format!("visits[{t}].diagnoses"), &v.diagnoses)?,
                procedures: unique(line, &format!("visits[{t}].procedures"), &v.procedures)?,
                medications: unique(line, &format!("visits[{t}].medications"), &v.medications)?,
            };
            if let Some(vocab) = vocab {
                vocab
                    .check_visit(&visit)
                    .map_err(|e| FormatError::at(line, &format!("visits[{t}]"), e))?;
            }
            visits.push(visit);
        }
        PatientRecord::new(self.id, visits).map_err(|e| FormatError::at(line, "visits", e))
    }
}

fn edges_to_adjacency(line: usize, field: &str, n: usize, edges: &[(usize, usize)]) -> Result<Adjacency, FormatError> {
    Adjacency::from_edges(n, edges.iter().copied()).map_err(|e| FormatError::at(line, field, e))
}

pub fn write_dataset(out: &mut impl Write, data: &Dataset, seed: Option<u64>) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT.to_owned(),
        version: VERSION,
        vocab: data.vocab.clone(),
        atom_vocab: data.graphs.atom_vocab,
        patients: data.records.len(),
        generator: data.generator.clone(),
        seed,
    };
    let mut emit = |line: Line| -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")
    };
    emit(Line::Header(header))?;
    for r in &data.records {
        emit(Line::Patient(r.into()))?;
    }
    for (name, g) in [("ehr", &data.graphs.ehr), ("ddi", &data.graphs.ddi)] {
        emit(Line::Graph(GraphLine {
            name: name.to_owned(),
            edges: g.edges().collect(),
        }))?;
    }
    for (m, mol) in data.graphs.molecules.iter().enumerate() {
        emit(Line::Molecule(MoleculeLine {
            medication: m,
            atoms: mol.num_atoms(),
            atom_types: mol.atom_types.clone(),
            bonds: mol.bonds.edges().collect(),
        }))?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, data: &Dataset, seed: Option<u64>) -> Result<(), FormatError> {
    let file = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(&mut w, data, seed).map_err(|e| FormatError::io(path, e))?;
    w.flush().map_err(|e| FormatError::io(path, e))
}

fn parse_line(n: usize, text: &str) -> Result<Line, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::at(n, "record", e))
}

fn lines(input: impl BufRead) -> impl Iterator<Item = Result<(usize, String), FormatError>> {
    input
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(|e| FormatError::at(i + 1, "record", e)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset, FormatError> {
    let mut it = lines(input);
    let header = match it.next().transpose()? {
        Some((n, text)) => match parse_line(n, &text)? {
            Line::Header(h) => (n, h),
            _ => return Err(FormatError::at(n, "kind", "first line must be the header")),
        },
        None => return Err(FormatError::at(1, "header", "empty file")),
    };
    let (hline, header) = header;
    if header.format != FORMAT {
        return Err(FormatError::at(hline, "format", format!("expected `{FORMAT}`, got `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(FormatError::at(hline, "version", format!("unsupported version {}", header.version)));
    }
    header.vocab.validate().map_err(|e| FormatError::at(hline, "vocab", e))?;
    let meds = header.vocab.medications;

    let mut records = Vec::with_capacity(header.patients);
    let (mut ehr, mut ddi) = (None, None);
    let mut molecules: Vec<Option<Molecule>> = vec![None; meds];
    let mut last = hline;
    for item in it {
        let (n, text) = item?;
        last = n;
        match parse_line(n, &text)? {
            Line::Header(_) => return Err(FormatError::at(n, "kind", "second header")),
            Line::Patient(p) => {
                if ehr.is_some() || ddi.is_some() {
                    return Err(FormatError::at(n, "kind", "patient after graph sections"));
                }
                records.push(p.into_record(n, Some(&header.vocab))?);
            }
            Line::Graph(g) => {
                let slot = match g.name.as_str() {
                    "ehr" => &mut ehr,
                    "ddi" => &mut ddi,
                    other => return Err(FormatError::at(n, "name", format!("unknown graph `{other}`"))),
                };
                if slot.is_some() {
                    return Err(FormatError::at(n, "name", format!("duplicate graph `{}`", g.name)));
                }
                *slot = Some(edges_to_adjacency(n, "edges", meds, &g.edges)?);
            }
            Line::Molecule(m) => {
                if m.medication >= meds {
                    return Err(FormatError::at(n, "medication", format!("index {} out of bounds ({meds})", m.medication)));
                }
                if m.atom_types.len() != m.atoms {
                    return Err(FormatError::at(
                        n,
                        "atom_types",
                        format!("{} types for {} atoms", m.atom_types.len(), m.atoms),
                    ));
                }
                if let Some(&t) = m.atom_types.iter().find(|&&t| t >= header.atom_vocab) {
                    return Err(FormatError::at(n, "atom_types", format!("type {t} outside atom vocabulary {}", header.atom_vocab)));
                }
                let bonds = edges_to_adjacency(n, "bonds", m.atoms, &m.bonds)?;
                let mol = Molecule::new(m.atom_types, bonds).map_err(|e| FormatError::at(n, "atoms", e))?;
                if molecules[m.medication].replace(mol).is_some() {
                    return Err(FormatError::at(n, "medication", format!("duplicate molecule {}", m.medication)));
                }
            }
        }
    }
    let end = last + 1;
    if records.len() != header.patients {
        return Err(FormatError::at(
            end,
            "patients",
            format!("header promises {} patients, found {}", header.patients, records.len()),
        ));
    }
    let ehr = ehr.ok_or_else(|| FormatError::at(end, "graph", "missing `ehr` graph"))?;
    let ddi = ddi.ok_or_else(|| FormatError::at(end, "graph", "missing `ddi` graph"))?;
    let molecules = molecules
        .into_iter()
        .enumerate()
        .map(|(m, mol)| mol.ok_or_else(|| FormatError::at(end, "molecule", format!("missing molecule for medication {m}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let data = Dataset {
        vocab: header.vocab,
        records,
        graphs: KnowledgeGraphs {
            ehr,
            ddi,
            molecules,
            atom_vocab: header.atom_vocab,
        },
        generator: header.generator,
    };
    data.validate().map_err(|e| FormatError::at(end, "dataset", e))?;
    Ok(data)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FormatError> {
    let file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_dataset(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))
}

/// Patient lines of a file, ignoring graph and molecule lines, so both a
/// patient-only file and a full dataset are accepted. A header, if present,
/// must declare the same code vocabulary as `vocab`.
pub fn read_patients(input: impl BufRead, vocab: &Vocab) -> Result<Vec<PatientRecord>, FormatError> {
    let mut out = Vec::new();
    for item in lines(input) {
        let (n, text) = item?;
        match parse_line(n, &text)? {
            Line::Patient(p) => out.push(p.into_record(n, Some(vocab))?),
            Line::Header(h) => {
                let theirs = (h.vocab.diagnoses, h.vocab.procedures, h.vocab.medications);
                let ours = (vocab.diagnoses, vocab.procedures, vocab.medications);
                if theirs != ours {
                    return Err(FormatError::Incompatible(format!(
                        "patient file vocabulary (diagnoses, procedures, medications) {theirs:?} differs from the model's {ours:?}"
                    )));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn load_patients(path: &Path, vocab: &Vocab) -> Result<Vec<PatientRecord>, FormatError> {
    let file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    read_patients(std::io::BufReader::new(file), vocab).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use acdnet_core::ehr::generate_synthetic;

    fn small() -> Dataset {
        generate_synthetic(
            &GenConfig {
                patients: 12,
                ..GenConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn to_text(d: &Dataset) -> String {
        let mut buf = Vec::new();
        write_dataset(&mut buf, d, Some(3)).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let d = small();
        let text = to_text(&d);
        let back = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(back, d);
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn errors_name_line_and_field() {
        let text = to_text(&small());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen("\"diagnoses\":[", "\"diagnoses\":[100000,", 1);
        let err = read_dataset(lines.join("\n").as_bytes()).unwrap_err();
        assert_eq!(err.line(), Some(3));
        assert!(err.to_string().contains("visits[0]"), "{err}");

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replacen("\"id\"", "\"ident\"", 1);
        let err = read_dataset(lines.join("\n").as_bytes()).unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert!(err.to_string().contains("ident"), "{err}");
    }

    #[test]
    fn missing_sections_are_reported() {
        let text = to_text(&small());
        let no_ddi: Vec<&str> = text.lines().filter(|l| !l.contains("\"name\":\"ddi\"")).collect();
        let err = read_dataset(no_ddi.join("\n").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("ddi"), "{err}");
        let short: Vec<&str> = text.lines().take(5).collect();
        assert!(read_dataset(short.join("\n").as_bytes()).is_err());
        assert!(read_dataset(&b""[..]).is_err());
    }

    #[test]
    fn patient_reader_skips_other_lines() {
        let d = small();
        let text = to_text(&d);
        let patients = read_patients(text.as_bytes(), &d.vocab).unwrap();
        assert_eq!(patients, d.records);
    }
}
