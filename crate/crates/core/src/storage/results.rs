use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::Path;

use super::atomic_write;
use crate::error::{Error, Result};
use crate::metrics::EvalRecord;
use crate::model::PipelineTrace;

/// One trace per line, in the order given.
pub fn write_results(path: &Path, traces: &[PipelineTrace]) -> Result<()> {
    let mut out = String::new();
    for trace in traces {
        out.push_str(&serde_json::to_string(trace).expect("traces serialize"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Streams traces from a results file. A bad line yields an error for that
/// line; earlier traces are unaffected.
pub struct ResultsReader {
    name: String,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl ResultsReader {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self {
            name: path.display().to_string(),
            lines: BufReader::new(File::open(path)?).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for ResultsReader {
    type Item = Result<PipelineTrace>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str(&line)
                    .map_err(|e| Error::parse_at_line(&self.name, self.line_no, &e)),
            );
        }
    }
}

pub fn read_results(path: &Path) -> Result<Vec<PipelineTrace>> {
    ResultsReader::open(path)?.collect()
}

/// Evaluation view of each trace. Failed traces keep their positives with an
/// empty ranking, so they score as misses.
pub fn traces_to_eval_records(traces: &[PipelineTrace]) -> Vec<EvalRecord> {
    traces
        .iter()
        .map(|t| EvalRecord {
            query_id: t.query_id.clone(),
            ranking: t.ranking.ids(),
            positives: t.positives.iter().cloned().collect(),
            subset_ranking: t.subset_ranking.as_ref().map(|r| r.ids()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        CaptionRecord, CaptionSource, QueryMode, RankedResult, ScoredImage, TargetCaption,
        TargetSource, TaskKind,
    };
    use chrono::{DateTime, Utc};
    use std::collections::BTreeMap;
    use std::fs;

    fn trace(id: &str, source: TargetSource) -> PipelineTrace {
        PipelineTrace {
            query_id: id.into(),
            mode: QueryMode::Cirevl,
            task: TaskKind::Cir,
            instruction: "make it night-time".into(),
            caption: Some(
                CaptionRecord::new("img1", "a dog", CaptionSource::Model("m".into()), DateTime::<Utc>::UNIX_EPOCH)
                    .unwrap(),
            ),
            target_caption: Some(TargetCaption {
                query_id: id.into(),
                text: "a dog at night".into(),
                source,
            }),
            reasoner_raw_reply: Some("Edited Description: a dog at night".into()),
            marker_missing: false,
            ranking: RankedResult {
                query_id: id.into(),
                mode: QueryMode::Cirevl,
                ranking: vec![
                    ScoredImage { image_id: "img2".into(), score: 0.9 },
                    ScoredImage { image_id: "img3".into(), score: -0.125 },
                ],
                excluded_ids: vec!["img1".into()],
            },
            subset_ranking: None,
            positives: vec!["img2".into()],
            timings: BTreeMap::from([("caption".to_string(), 0)]),
            error: None,
        }
    }

    #[test]
    fn write_read_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let traces = vec![trace("q1", TargetSource::Llm("gpt".into())), trace("q2", TargetSource::UserOverride)];
        write_results(&path, &traces).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back, traces);
        assert!(fs::read_to_string(&path).unwrap().contains("\"source\":\"user-override\""));
        let records = traces_to_eval_records(&back);
        assert_eq!(records[0].ranking, ["img2", "img3"]);
    }

    #[test]
    fn truncated_tail_is_reported_at_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_results(&path, &[trace("q1", TargetSource::UserOverride), trace("q2", TargetSource::UserOverride)]).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 20);
        fs::write(&path, text).unwrap();

        let items: Vec<_> = ResultsReader::open(&path).unwrap().collect();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].as_ref().unwrap().query_id, "q1");
        assert!(matches!(items[1], Err(Error::Parse { line: 2, .. })));
        assert!(read_results(&path).is_err());
    }
}
