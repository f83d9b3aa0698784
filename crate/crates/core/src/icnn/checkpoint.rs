//! Plain-text checkpoints for trained networks.
//!
//! The format is line-oriented and human-inspectable: a magic/version line,
//! architecture and dimension headers, one `tensor <name> <rows> <cols> v…`
//! line per weight block (row-major), and a closing `end`. Floats are written
//! with Rust's shortest round-trip formatting, so a save/load cycle restores
//! every parameter bit-for-bit and equal networks produce byte-identical
//! files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Activation, DeepIcnn, IcnnPotential, SingleLayerIcnn, ULayer, ZLayer};
use crate::{Error, Result};

const MAGIC: &str = "otbayes-icnn v1";

fn io_err(action: &str, err: std::io::Error) -> Error {
    Error::Checkpoint {
        context: format!("{action}: {err}"),
    }
}

/// Serialize a network to a writer in the checkpoint format.
pub fn write_checkpoint<W: Write>(net: &IcnnPotential, out: &mut W) -> Result<()> {
    let mut emit = |line: String| writeln!(out, "{line}").map_err(|e| io_err("write", e));
    emit(MAGIC.to_string())?;
    match net {
        IcnnPotential::Single(net) => {
            emit("arch single-layer".into())?;
            emit(format!("dim-x {}", net.dim_x()))?;
            emit(format!("dim-y {}", net.dim_y()))?;
            emit(format!("units {}", net.units()))?;
            for (name, rows, cols, values) in net.tensors() {
                emit(tensor_line(name, rows, cols, &values))?;
            }
        }
        IcnnPotential::Deep(net) => {
            let (z_layers, u_layers) = net.layers();
            emit("arch deep".into())?;
            emit(format!("dim-x {}", net.dim_x()))?;
            emit(format!("dim-y {}", net.dim_y()))?;
            emit(format!("z-layers {}", z_layers.len()))?;
            for (l, layer) in z_layers.iter().enumerate() {
                emit(format!("z-activation {l} {}", layer.act.name()))?;
            }
            for (j, layer) in u_layers.iter().enumerate() {
                emit(format!("u-activation {j} {}", layer.act.name()))?;
            }
            for (l, layer) in z_layers.iter().enumerate() {
                emit(matrix_line(&format!("z{l}.wz"), &layer.wz))?;
                emit(matrix_line(&format!("z{l}.wu"), &layer.wu))?;
                emit(matrix_line(&format!("z{l}.wx"), &layer.wx))?;
                emit(vector_line(&format!("z{l}.b"), &layer.b))?;
            }
            for (j, layer) in u_layers.iter().enumerate() {
                emit(matrix_line(&format!("u{j}.wt"), &layer.wt))?;
                emit(vector_line(&format!("u{j}.bt"), &layer.bt))?;
            }
        }
    }
    emit("end".into())
}

/// Serialize a network to a file.
pub fn save_checkpoint(net: &IcnnPotential, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(&format!("create {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(net, &mut out)?;
    out.flush().map_err(|e| io_err("flush", e))
}

/// Parse a network from a reader in the checkpoint format.
pub fn read_checkpoint<R: BufRead>(input: R) -> Result<IcnnPotential> {
    let mut lines = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| io_err("read", e))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    let mut cursor = Lines { lines, pos: 0 };
    if cursor.next_line()? != MAGIC {
        return Err(Error::Checkpoint {
            context: format!("missing magic header `{MAGIC}`"),
        });
    }
    let arch = cursor.expect_tag("arch")?;
    let net = match arch.as_str() {
        "single-layer" => read_single(&mut cursor)?,
        "deep" => read_deep(&mut cursor)?,
        other => {
            return Err(Error::Checkpoint {
                context: format!("unknown architecture `{other}`"),
            })
        }
    };
    if cursor.next_line()? != "end" {
        return Err(Error::Checkpoint {
            context: "missing `end` terminator".into(),
        });
    }
    Ok(net)
}

/// Parse a network from a file.
pub fn load_checkpoint(path: &Path) -> Result<IcnnPotential> {
    let file = File::open(path).map_err(|e| io_err(&format!("open {}", path.display()), e))?;
    read_checkpoint(BufReader::new(file))
}

struct Lines {
    lines: Vec<String>,
    pos: usize,
}

impl Lines {
    fn next_line(&mut self) -> Result<&str> {
        let line = self.lines.get(self.pos).ok_or_else(|| Error::Checkpoint {
            context: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(line.trim())
    }

    /// Read a `<tag> <value>` line and return the value.
    fn expect_tag(&mut self, tag: &str) -> Result<String> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(Error::Checkpoint {
                context: format!("expected `{tag} …`, found `{line}`"),
            });
        }
        let value = parts.next().ok_or_else(|| Error::Checkpoint {
            context: format!("`{tag}` line has no value"),
        })?;
        if parts.next().is_some() {
            return Err(Error::Checkpoint {
                context: format!("trailing tokens on `{tag}` line"),
            });
        }
        Ok(value.to_string())
    }

    fn expect_usize(&mut self, tag: &str) -> Result<usize> {
        let value = self.expect_tag(tag)?;
        value.parse().map_err(|_| Error::Checkpoint {
            context: format!("`{tag}` value `{value}` is not a count"),
        })
    }

    /// Read `tensor <name> <rows> <cols> v…` for a known name.
    fn expect_tensor(&mut self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") || parts.next() != Some(name) {
            return Err(Error::Checkpoint {
                context: format!("expected `tensor {name} …`, found `{line}`"),
            });
        }
        let parse_dim = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Checkpoint {
                context: format!("tensor {name}: malformed shape"),
            })
        };
        let rows = parse_dim(parts.next())?;
        let cols = parse_dim(parts.next())?;
        let mut values = Vec::with_capacity(rows * cols);
        for tok in parts {
            let v: f64 = tok.parse().map_err(|_| Error::Checkpoint {
                context: format!("tensor {name}: `{tok}` is not a float"),
            })?;
            values.push(v);
        }
        if values.len() != rows * cols {
            return Err(Error::Checkpoint {
                context: format!(
                    "tensor {name}: {rows}×{cols} needs {} values, found {}",
                    rows * cols,
                    values.len()
                ),
            });
        }
        Ok((rows, cols, values))
    }

    fn expect_matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let (rows, cols, values) = self.expect_tensor(name)?;
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }

    fn expect_vector(&mut self, name: &str) -> Result<DVector<f64>> {
        let (rows, cols, values) = self.expect_tensor(name)?;
        if cols != 1 {
            return Err(Error::Checkpoint {
                context: format!("tensor {name}: expected a column vector, got {rows}×{cols}"),
            });
        }
        Ok(DVector::from_vec(values))
    }
}

fn read_single(cursor: &mut Lines) -> Result<IcnnPotential> {
    let dim_x = cursor.expect_usize("dim-x")?;
    let dim_y = cursor.expect_usize("dim-y")?;
    let units = cursor.expect_usize("units")?;
    let w = cursor.expect_vector("w")?;
    let wx = cursor.expect_matrix("wx")?;
    let wy = cursor.expect_matrix("wy")?;
    let bias = cursor.expect_vector("bias")?;
    if w.len() != units || wx.ncols() != dim_x || wy.ncols() != dim_y {
        return Err(Error::Checkpoint {
            context: format!(
                "tensor shapes disagree with headers (units {units}, dim-x {dim_x}, dim-y {dim_y})"
            ),
        });
    }
    Ok(IcnnPotential::Single(SingleLayerIcnn::new(w, wx, wy, bias)?))
}

fn read_deep(cursor: &mut Lines) -> Result<IcnnPotential> {
    let dim_x = cursor.expect_usize("dim-x")?;
    let dim_y = cursor.expect_usize("dim-y")?;
    let depth = cursor.expect_usize("z-layers")?;
    if depth == 0 {
        return Err(Error::Checkpoint {
            context: "z-layers must be at least 1".into(),
        });
    }
    let mut z_acts = Vec::with_capacity(depth);
    for l in 0..depth {
        let line = cursor.next_line()?;
        let expect = format!("z-activation {l} ");
        let name = line.strip_prefix(&expect).ok_or_else(|| Error::Checkpoint {
            context: format!("expected `{expect}…`, found `{line}`"),
        })?;
        z_acts.push(Activation::from_name(name.trim())?);
    }
    let mut u_acts = Vec::with_capacity(depth - 1);
    for j in 0..depth - 1 {
        let line = cursor.next_line()?;
        let expect = format!("u-activation {j} ");
        let name = line.strip_prefix(&expect).ok_or_else(|| Error::Checkpoint {
            context: format!("expected `{expect}…`, found `{line}`"),
        })?;
        u_acts.push(Activation::from_name(name.trim())?);
    }
    let mut z_layers = Vec::with_capacity(depth);
    for (l, act) in z_acts.into_iter().enumerate() {
        let wz = cursor.expect_matrix(&format!("z{l}.wz"))?;
        let wu = cursor.expect_matrix(&format!("z{l}.wu"))?;
        let wx = cursor.expect_matrix(&format!("z{l}.wx"))?;
        let b = cursor.expect_vector(&format!("z{l}.b"))?;
        z_layers.push(ZLayer { wz, wu, wx, b, act });
    }
    let mut u_layers = Vec::with_capacity(depth - 1);
    for (j, act) in u_acts.into_iter().enumerate() {
        let wt = cursor.expect_matrix(&format!("u{j}.wt"))?;
        let bt = cursor.expect_vector(&format!("u{j}.bt"))?;
        u_layers.push(ULayer { wt, bt, act });
    }
    let dims_ok = z_layers[0].wu.ncols() == dim_y && z_layers[0].wx.ncols() == dim_x;
    if !dims_ok {
        return Err(Error::Checkpoint {
            context: format!(
                "layer-0 tensor shapes disagree with headers (dim-x {dim_x}, dim-y {dim_y})"
            ),
        });
    }
    Ok(IcnnPotential::Deep(DeepIcnn::new(z_layers, u_layers, dim_x)?))
}

fn tensor_line(name: &str, rows: usize, cols: usize, values: &[f64]) -> String {
    let mut line = format!("tensor {name} {rows} {cols}");
    for v in values {
        line.push(' ');
        line.push_str(&v.to_string());
    }
    line
}

fn matrix_line(name: &str, m: &DMatrix<f64>) -> String {
    let mut values = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            values.push(m[(i, j)]);
        }
    }
    tensor_line(name, m.nrows(), m.ncols(), &values)
}

fn vector_line(name: &str, v: &DVector<f64>) -> String {
    tensor_line(name, v.len(), 1, v.as_slice())
}
