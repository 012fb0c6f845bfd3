//! Binary checkpoint of a [`Model`].
//!
//! ```text
//! CIEREC-CKPT 1\n
//! config <model config as one JSON line>\n
//! shape <n_users> <n_items> <vocab>\n
//! section <name> <rows> <cols>\n<rows*cols little-endian f64>   (repeated)
//! end\n
//! ```
//!
//! Sections appear in parameter registration order. Loading rebuilds the
//! model from the config and requires every section to match by name and
//! shape.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &str = "CIEREC-CKPT 1";

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "config {}", serde_json::to_string(&model.config)?)?;
    writeln!(w, "shape {} {} {}", model.n_users, model.n_items, model.vocab)?;
    for id in model.store.ids() {
        let t = model.store.get(id);
        writeln!(w, "section {} {} {}", model.store.name(id), t.rows, t.cols)?;
        let mut buf = Vec::with_capacity(t.data.len() * 8);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Checkpoint(format!("expected {key:?} line, found {line:?}")))
}

fn parse_num(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Checkpoint(format!("bad number {s:?}")))
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
    let mut r = BufReader::new(r);
    let magic = header_line(&mut r)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("not a checkpoint (header {magic:?})")));
    }
    let config: ModelConfig = serde_json::from_str(field(&header_line(&mut r)?, "config")?)?;
    let shape_line = header_line(&mut r)?;
    let shape: Vec<usize> = field(&shape_line, "shape")?
        .split(' ')
        .map(parse_num)
        .collect::<Result<_>>()?;
    let [n_users, n_items, vocab] = shape[..] else {
        return Err(Error::Checkpoint(format!("bad shape line {shape_line:?}")));
    };
    let mut model = Model::new(config, n_users, n_items, vocab, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let line = header_line(&mut r)?;
        let parts: Vec<&str> = field(&line, "section")?.split(' ').collect();
        let [name, rows, cols] = parts[..] else {
            return Err(Error::Checkpoint(format!("bad section line {line:?}")));
        };
        let expected = model.store.name(id).to_string();
        if name != expected {
            return Err(Error::Checkpoint(format!("expected section {expected}, found {name}")));
        }
        let (rows, cols) = (parse_num(rows)?, parse_num(cols)?);
        let t = model.store.get_mut(id);
        if (rows, cols) != (t.rows, t.cols) {
            return Err(Error::Checkpoint(format!(
                "section {name} is {rows}x{cols} but the config implies {}x{}",
                t.rows, t.cols
            )));
        }
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("section {name} is truncated")))?;
        for (v, chunk) in t.data.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    let end = header_line(&mut r)?;
    if end != "end" {
        return Err(Error::Checkpoint(format!("expected end marker, found {end:?}")));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Components;
    use crate::scoring::Backbone;

    fn small(backbone: Backbone) -> Model {
        let config = ModelConfig {
            backbone,
            dim: 4,
            content_dim: 6,
            lstm_input: 3,
            components: Components::ALL,
            ..Default::default()
        };
        Model::new(config, 3, 5, 4, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for b in [Backbone::Mf, Backbone::Vbpr] {
            let m = small(b);
            let mut bytes = Vec::new();
            write_checkpoint(&m, &mut bytes).unwrap();
            let back = read_checkpoint(&bytes[..]).unwrap();
            assert_eq!(back.config, m.config);
            for id in m.store.ids() {
                assert_eq!(back.store.get(id), m.store.get(id));
            }
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = small(Backbone::Mf);
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        assert!(read_checkpoint(&b"garbage\n"[..]).is_err());
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() / 2]), Err(Error::Checkpoint(_))));
        let text = String::from_utf8_lossy(&bytes).replacen("shape 3 5 4", "shape 3 6 4", 1);
        assert!(read_checkpoint(text.as_bytes()).is_err());
    }
}
