use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::{Corpus, CorpusSpec, UtteranceRecord};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OCTC";
pub const CORPUS_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: CorpusSpec,
    vocabulary: Vocabulary,
}

fn u16_len(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::config(format!("{what} length {n} exceeds 65535")))
}

fn put_ids(buf: &mut Vec<u8>, ids: &[usize]) -> Result<()> {
    buf.extend_from_slice(&u16_len(ids.len(), "token sequence")?.to_le_bytes());
    for &id in ids {
        buf.extend_from_slice(&u16_len(id, "token id")?.to_le_bytes());
    }
    Ok(())
}

fn encode_record(r: &UtteranceRecord) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(16 + r.features.len() * 4);
    b.extend_from_slice(&r.id.to_le_bytes());
    b.push(u8::try_from(r.language).map_err(|_| Error::config("language id exceeds 255"))?);
    b.extend_from_slice(&(r.frames as u32).to_le_bytes());
    b.extend_from_slice(&u16_len(r.feature_dim, "feature_dim")?.to_le_bytes());
    for v in &r.features {
        b.extend_from_slice(&v.to_le_bytes());
    }
    put_ids(&mut b, &r.transcript)?;
    b.push(u8::try_from(r.translations.len()).map_err(|_| Error::config("too many translations"))?);
    for (&k, ids) in &r.translations {
        b.push(k as u8);
        put_ids(&mut b, ids)?;
    }
    match &r.previous {
        Some(p) => {
            b.push(1);
            put_ids(&mut b, p)?;
        }
        None => b.push(0),
    }
    Ok(b)
}

pub fn write_corpus_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        spec: corpus.spec.clone(),
        vocabulary: corpus.vocabulary.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(CORPUS_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for r in &corpus.records {
        if r.features.len() != r.frames * r.feature_dim {
            return Err(Error::shape(format!("utterance {} feature size", r.id)));
        }
        let body = encode_record(r)?;
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::write(path, write_corpus_bytes(corpus)?)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn ids(&mut self, vocab: &Vocabulary, what: &str) -> Result<Vec<usize>> {
        let n = self.u16(what)? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.pos;
            let id = self.u16(what)? as usize;
            if id >= vocab.size() {
                return Err(Error::Format {
                    offset: at as u64,
                    msg: format!("{what} token {id} outside vocabulary of {}", vocab.size()),
                });
            }
            out.push(id);
        }
        Ok(out)
    }
}

fn decode_record(c: &mut Cursor<'_>, vocab: &Vocabulary) -> Result<UtteranceRecord> {
    let id = c.u32("utterance id")?;
    let language = c.u8("language")? as usize;
    if language >= vocab.num_languages() {
        return Err(c.err(format!("language {language} out of range")));
    }
    let frames = c.u32("frame count")? as usize;
    let feature_dim = c.u16("feature dim")? as usize;
    let n = frames
        .checked_mul(feature_dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| c.err("feature block size overflows"))?;
    let raw = c.take(n, "features")?;
    let features = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let transcript = c.ids(vocab, "transcript")?;
    let count = c.u8("translation count")?;
    let mut translations = BTreeMap::new();
    for _ in 0..count {
        let k = c.u8("translation target")? as usize;
        translations.insert(k, c.ids(vocab, "translation")?);
    }
    let previous = match c.u8("previous flag")? {
        0 => None,
        1 => Some(c.ids(vocab, "previous transcript")?),
        f => return Err(c.err(format!("bad previous flag {f}"))),
    };
    Ok(UtteranceRecord {
        id,
        language,
        frames,
        feature_dim,
        features,
        transcript,
        translations,
        previous,
    })
}

pub fn read_corpus_bytes(buf: &[u8]) -> Result<Corpus> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, not a corpus file".into(),
        });
    }
    let version = c.u8("version")?;
    if version != CORPUS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let hlen = c.u32("header length")? as usize;
    let at = c.pos;
    let header: Header = serde_json::from_slice(c.take(hlen, "header")?).map_err(|e| Error::Format {
        offset: at as u64,
        msg: format!("header: {e}"),
    })?;
    header.vocabulary.validate()?;
    let mut records = Vec::new();
    while c.pos < buf.len() {
        let start = c.pos;
        let len = c.u32("record length")? as usize;
        let body = c.take(len, "record")?;
        let mut inner = Cursor {
            buf: &buf[..c.pos],
            pos: start + 4,
        };
        debug_assert_eq!(inner.buf.len() - inner.pos, body.len());
        let rec = decode_record(&mut inner, &header.vocabulary)?;
        if inner.pos != c.pos {
            return Err(inner.err("record has trailing bytes"));
        }
        records.push(rec);
    }
    Ok(Corpus {
        spec: header.spec,
        vocabulary: header.vocabulary,
        records,
    })
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    read_corpus_bytes(&std::fs::read(path)?)
}
