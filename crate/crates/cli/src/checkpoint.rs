//! Checkpoint files.
//!
//! A checkpoint is a TOML header followed by the logit table:
//!
//! ```text
//! [checkpoint]
//! format = 1
//! build = "cedd-cli 0.1.0"
//! charset = " abc..."
//! data_tokens = 30
//! params = 215040
//!
//! [config.model]
//! ...
//! %% logits
//! <one table row of data_tokens space-separated floats per line>
//! ```
//!
//! Floats are written in shortest round-trip form, so a checkpoint reloads
//! bit-for-bit.

use std::fmt::Write as _;
use std::path::Path;

use cedd_core::model::TabularModel;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::Charset;
use crate::error::{io_err, CliError, Result};

pub const FORMAT: u32 = 1;
pub const BUILD_ID: &str = concat!("cedd-cli ", env!("CARGO_PKG_VERSION"));
const SEPARATOR: &str = "%% logits";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format: u32,
    build: String,
    charset: String,
    data_tokens: usize,
    params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    checkpoint: Meta,
    config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub charset: Charset,
    pub build: String,
    pub model: TabularModel,
}

fn malformed<T>(detail: impl Into<String>) -> Result<T> {
    Err(CliError::Parse { what: "checkpoint", detail: detail.into() })
}

impl Checkpoint {
    pub fn new(config: RunConfig, charset: Charset, model: TabularModel) -> Self {
        Self { config, charset, build: BUILD_ID.to_string(), model }
    }

    pub fn to_text(&self) -> String {
        let v = self.charset.data_tokens();
        let header = Header {
            checkpoint: Meta {
                format: FORMAT,
                build: self.build.clone(),
                charset: self.charset.chars().iter().collect(),
                data_tokens: v,
                params: self.model.param_count(),
            },
            config: self.config.clone(),
        };
        let mut out = toml::to_string(&header).expect("header serializes");
        out.push_str(SEPARATOR);
        out.push('\n');
        for row in self.model.logits().chunks(v) {
            let mut line = String::with_capacity(row.len() * 8);
            for (k, w) in row.iter().enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                write!(line, "{w}").unwrap();
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let Some(split) = text.find(&format!("\n{SEPARATOR}\n")) else {
            return malformed("missing logit table");
        };
        let header: Header = toml::from_str(&text[..split + 1])
            .map_err(|e| CliError::Parse { what: "checkpoint header", detail: e.to_string() })?;
        let meta = header.checkpoint;
        if meta.format != FORMAT {
            return malformed(format!("unsupported format {}", meta.format));
        }
        header.config.validate()?;
        let charset = Charset::from_chars(meta.charset.chars())?;
        if charset.data_tokens() != meta.data_tokens {
            return malformed("charset size disagrees with data_tokens");
        }
        let body = &text[split + SEPARATOR.len() + 2..];
        let mut logits = Vec::with_capacity(meta.params);
        for (line_no, line) in body.lines().enumerate() {
            let before = logits.len();
            for field in line.split(' ') {
                match field.parse::<f64>() {
                    Ok(w) => logits.push(w),
                    Err(e) => return malformed(format!("table line {}: {e}", line_no + 1)),
                }
            }
            if logits.len() - before != meta.data_tokens {
                return malformed(format!("table line {} has the wrong width", line_no + 1));
            }
        }
        if logits.len() != meta.params {
            return malformed(format!("expected {} parameters, found {}", meta.params, logits.len()));
        }
        let spec = header.config.spec(meta.data_tokens)?;
        let model = TabularModel::from_logits(&spec, header.config.model.buckets, header.config.model.context, logits)?;
        Ok(Self { config: header.config, charset, build: meta.build, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}
