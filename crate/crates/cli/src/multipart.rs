//! Minimal `multipart/form-data` bodies for relight responses and test clients.

use anyhow::{anyhow, bail, Context, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub name: String,
    pub filename: Option<String>,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Part {
    pub fn json(name: &str, value: &serde_json::Value) -> Self {
        Self {
            name: name.into(),
            filename: None,
            content_type: "application/json".into(),
            body: value.to_string().into_bytes(),
        }
    }

    pub fn text(name: &str, body: &str) -> Self {
        Self { name: name.into(), filename: None, content_type: "text/plain".into(), body: body.as_bytes().to_vec() }
    }

    pub fn png(name: &str, bytes: Vec<u8>) -> Self {
        Self { name: name.into(), filename: Some(format!("{name}.png")), content_type: "image/png".into(), body: bytes }
    }
}

pub fn content_type(boundary: &str) -> String {
    format!("multipart/form-data; boundary={boundary}")
}

pub fn encode(parts: &[Part], boundary: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        let mut disposition = format!("Content-Disposition: form-data; name=\"{}\"", p.name);
        if let Some(f) = &p.filename {
            disposition.push_str(&format!("; filename=\"{f}\""));
        }
        out.extend_from_slice(format!("{disposition}\r\nContent-Type: {}\r\n\r\n", p.content_type).as_bytes());
        out.extend_from_slice(&p.body);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    out
}

/// Boundary parameter of a `multipart/*` content type.
pub fn boundary_of(content_type: &str) -> Result<String> {
    content_type
        .split(';')
        .filter_map(|p| p.trim().strip_prefix("boundary="))
        .map(|b| b.trim_matches('"').to_string())
        .next()
        .ok_or_else(|| anyhow!("no boundary in content type {content_type:?}"))
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    hay.get(from..)?.windows(needle.len()).position(|w| w == needle).map(|i| i + from)
}

pub fn decode(body: &[u8], boundary: &str) -> Result<Vec<Part>> {
    let delim = format!("--{boundary}").into_bytes();
    let mut pos = find(body, &delim, 0).context("missing opening boundary")? + delim.len();
    let mut parts = Vec::new();
    loop {
        if body[pos..].starts_with(b"--") {
            return Ok(parts);
        }
        pos += 2;
        let head_end = find(body, b"\r\n\r\n", pos).context("unterminated part headers")?;
        let headers = std::str::from_utf8(&body[pos..head_end]).context("part headers are not UTF-8")?;
        let start = head_end + 4;
        let mut close = b"\r\n".to_vec();
        close.extend_from_slice(&delim);
        let end = find(body, &close, start).context("unterminated part")?;

        let mut part = Part { name: String::new(), filename: None, content_type: "text/plain".into(), body: body[start..end].to_vec() };
        for line in headers.split("\r\n") {
            let (key, value) = line.split_once(':').ok_or_else(|| anyhow!("bad header line {line:?}"))?;
            match key.trim().to_ascii_lowercase().as_str() {
                "content-type" => part.content_type = value.trim().to_string(),
                "content-disposition" => {
                    for field in value.split(';').map(str::trim) {
                        if let Some(v) = field.strip_prefix("name=") {
                            part.name = v.trim_matches('"').to_string();
                        } else if let Some(v) = field.strip_prefix("filename=") {
                            part.filename = Some(v.trim_matches('"').to_string());
                        }
                    }
                }
                _ => {}
            }
        }
        if part.name.is_empty() {
            bail!("part without a name");
        }
        parts.push(part);
        pos = end + close.len();
    }
}
