//! On-disk formats: VGRID volumes and masks (raw little-endian payload
//! plus a JSON sidecar), OBJ and OFF triangle meshes, versioned network
//! parameter files, metric/topology reports, and the training-history CSV.
//!
//! Every reader reports malformed input with the byte offset where parsing
//! failed. VGRID and parameter files round-trip byte-exactly; meshes
//! round-trip with shortest-representation decimals (exact for `f64`).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use odeform::mesh::TriangleMesh;
use odeform::net::{DeformNetParams, NetHyper, LEAKY_SLOPE};
use odeform::train::EpochRecord;
use odeform::volume::{LabelMask, Volume};

/// JSON sidecar accompanying a raw VGRID payload.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct VgridSidecar {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub dtype: String,
    pub order: String,
}

/// Sidecar path for a payload path: the payload's full name plus `.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut name = payload.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    payload.with_file_name(name)
}

fn read_sidecar(payload: &Path) -> Result<VgridSidecar> {
    let side = sidecar_path(payload);
    let text = fs::read_to_string(&side)
        .with_context(|| format!("reading sidecar {}", side.display()))?;
    let sidecar: VgridSidecar = serde_json::from_str(&text).map_err(|e| {
        let offset = byte_offset(&text, e.line(), e.column());
        anyhow::anyhow!("malformed sidecar {} at byte {offset}: {e}", side.display())
    })?;
    if sidecar.order != "x-fastest" {
        bail!(
            "sidecar {} declares order {:?}; only \"x-fastest\" is supported",
            side.display(),
            sidecar.order
        );
    }
    if sidecar.dims.iter().any(|&d| d == 0) {
        bail!("sidecar {} declares empty dims {:?}", side.display(), sidecar.dims);
    }
    Ok(sidecar)
}

/// 0-based byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

/// Write a volume as VGRID: `f32` little-endian payload, x-fastest.
pub fn write_volume_vgrid(path: &Path, volume: &Volume) -> Result<()> {
    let sidecar = VgridSidecar {
        dims: volume.dims(),
        spacing: volume.spacing(),
        dtype: "f32".into(),
        order: "x-fastest".into(),
    };
    let mut payload = Vec::with_capacity(volume.len() * 4);
    for &v in volume.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, payload).with_context(|| format!("writing {}", path.display()))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)
        .with_context(|| format!("writing sidecar for {}", path.display()))?;
    Ok(())
}

pub fn read_volume_vgrid(path: &Path) -> Result<Volume> {
    let sidecar = read_sidecar(path)?;
    if sidecar.dtype != "f32" {
        bail!(
            "{} holds dtype {:?}, expected \"f32\" (read masks with the mask reader)",
            path.display(),
            sidecar.dtype
        );
    }
    let payload = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let n = sidecar.dims[0] * sidecar.dims[1] * sidecar.dims[2];
    if payload.len() != 4 * n {
        bail!(
            "{}: payload is {} bytes, dims {:?} need {}",
            path.display(),
            payload.len(),
            sidecar.dims,
            4 * n
        );
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Volume::new(sidecar.dims, sidecar.spacing, data)?)
}

/// Write a label mask as VGRID with dtype `u8`.
pub fn write_mask_vgrid(path: &Path, mask: &LabelMask) -> Result<()> {
    let sidecar = VgridSidecar {
        dims: mask.dims(),
        spacing: 1.0,
        dtype: "u8".into(),
        order: "x-fastest".into(),
    };
    fs::write(path, mask.labels()).with_context(|| format!("writing {}", path.display()))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)
        .with_context(|| format!("writing sidecar for {}", path.display()))?;
    Ok(())
}

pub fn read_mask_vgrid(path: &Path) -> Result<LabelMask> {
    let sidecar = read_sidecar(path)?;
    if sidecar.dtype != "u8" {
        bail!("{} holds dtype {:?}, expected \"u8\"", path.display(), sidecar.dtype);
    }
    let labels = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let n = sidecar.dims[0] * sidecar.dims[1] * sidecar.dims[2];
    if labels.len() != n {
        bail!(
            "{}: payload is {} bytes, dims {:?} need {}",
            path.display(),
            labels.len(),
            sidecar.dims,
            n
        );
    }
    let mut alphabet: Vec<u8> = labels.clone();
    alphabet.sort_unstable();
    alphabet.dedup();
    Ok(LabelMask::new(sidecar.dims, labels, &alphabet)?)
}

/// Write a mesh as Wavefront OBJ (`v` and 1-based `f` records only).
pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut vertices = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut offset = 0usize;
    for line in text.split('\n') {
        let line_offset = offset;
        offset += line.len() + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut v = [0.0; 3];
                for c in v.iter_mut() {
                    let token = parts.next().ok_or_else(|| {
                        anyhow::anyhow!(
                            "{} at byte {line_offset}: vertex record with fewer than 3 coordinates",
                            path.display()
                        )
                    })?;
                    *c = token.parse().map_err(|_| {
                        anyhow::anyhow!(
                            "{} at byte {line_offset}: bad vertex coordinate {token:?}",
                            path.display()
                        )
                    })?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let mut f = [0u32; 3];
                for c in f.iter_mut() {
                    let token = parts.next().ok_or_else(|| {
                        anyhow::anyhow!(
                            "{} at byte {line_offset}: face record with fewer than 3 indices",
                            path.display()
                        )
                    })?;
                    let idx: usize = token.parse().map_err(|_| {
                        anyhow::anyhow!(
                            "{} at byte {line_offset}: bad face index {token:?} (only plain 1-based indices are supported)",
                            path.display()
                        )
                    })?;
                    if idx == 0 || idx > vertices.len() {
                        bail!(
                            "{} at byte {line_offset}: face index {idx} outside 1..={}",
                            path.display(),
                            vertices.len()
                        );
                    }
                    *c = (idx - 1) as u32;
                }
                if parts.next().is_some() {
                    bail!(
                        "{} at byte {line_offset}: only triangle faces are supported",
                        path.display()
                    );
                }
                faces.push(f);
            }
            _ => {} // comments, empty lines, and non-geometry records
        }
    }
    Ok(TriangleMesh::new(vertices, faces)?)
}

/// Write a mesh in OFF format.
pub fn write_off(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut out = String::from("OFF\n");
    out.push_str(&format!("{} {} 0\n", mesh.vertex_count(), mesh.face_count()));
    for v in mesh.vertices() {
        out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_off(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // Offset-tracked token stream over non-comment lines.
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    let mut offset = 0usize;
    for line in text.split('\n') {
        let line_offset = offset;
        offset += line.len() + 1;
        let body = line.split('#').next().unwrap_or("");
        let mut col = 0usize;
        for token in body.split_whitespace() {
            // Locate the token inside the line for a precise offset.
            let pos = body[col..].find(token).map(|p| p + col).unwrap_or(col);
            tokens.push((line_offset + pos, token));
            col = pos + token.len();
        }
    }
    let mut it = tokens.into_iter();
    let (off0, magic) = it.next().ok_or_else(|| {
        anyhow::anyhow!("{} at byte 0: empty OFF file", path.display())
    })?;
    if magic != "OFF" {
        bail!("{} at byte {off0}: expected magic \"OFF\", found {magic:?}", path.display());
    }
    fn next_usize<'a>(
        it: &mut impl Iterator<Item = (usize, &'a str)>,
        path: &Path,
        what: &str,
    ) -> Result<(usize, usize)> {
        let (o, t) = it
            .next()
            .ok_or_else(|| anyhow::anyhow!("{}: truncated before {what}", path.display()))?;
        let v = t.parse().map_err(|_| {
            anyhow::anyhow!("{} at byte {o}: bad {what} {t:?}", path.display())
        })?;
        Ok((o, v))
    }
    let (_, n_vertices) = next_usize(&mut it, path, "vertex count")?;
    let (_, n_faces) = next_usize(&mut it, path, "face count")?;
    let (_, _n_edges) = next_usize(&mut it, path, "edge count")?;
    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let mut v = [0.0; 3];
        for c in v.iter_mut() {
            let (o, t) = it.next().ok_or_else(|| {
                anyhow::anyhow!("{}: truncated inside vertex list", path.display())
            })?;
            *c = t.parse().map_err(|_| {
                anyhow::anyhow!("{} at byte {o}: bad vertex coordinate {t:?}", path.display())
            })?;
        }
        vertices.push(v);
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (o, arity) = next_usize(&mut it, path, "face arity")?;
        if arity != 3 {
            bail!("{} at byte {o}: only triangle faces are supported, found {arity}", path.display());
        }
        let mut f = [0u32; 3];
        for c in f.iter_mut() {
            let (o, t) = it.next().ok_or_else(|| {
                anyhow::anyhow!("{}: truncated inside face list", path.display())
            })?;
            let idx: usize = t.parse().map_err(|_| {
                anyhow::anyhow!("{} at byte {o}: bad face index {t:?}", path.display())
            })?;
            if idx >= n_vertices {
                bail!("{} at byte {o}: face index {idx} outside 0..{n_vertices}", path.display());
            }
            *c = idx as u32;
        }
        faces.push(f);
    }
    Ok(TriangleMesh::new(vertices, faces)?)
}

/// Mesh I/O dispatched on the file extension (`.obj` or `.off`).
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(path),
        Some("off") => read_off(path),
        other => bail!("unsupported mesh extension {other:?} (use .obj or .off)"),
    }
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => write_obj(path, mesh),
        Some("off") => write_off(path, mesh),
        other => bail!("unsupported mesh extension {other:?} (use .obj or .off)"),
    }
}

pub const NET_FORMAT_TAG: &str = "dnet-v1";

/// Header line of a network parameter file.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct NetHeader {
    format: String,
    hyper: NetHyper,
    param_count: usize,
    activation: String,
}

/// Write network parameters: one JSON header line, then the raw
/// little-endian `f64` payload. Bit-exact round trip.
pub fn write_net(path: &Path, net: &DeformNetParams) -> Result<()> {
    let header = NetHeader {
        format: NET_FORMAT_TAG.into(),
        hyper: *net.hyper(),
        param_count: net.param_count(),
        activation: format!("leaky_relu_{LEAKY_SLOPE}"),
    };
    let mut file =
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(net.param_count() * 8);
    for &p in net.params() {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    file.write_all(&payload)?;
    Ok(())
}

pub fn read_net(path: &Path) -> Result<DeformNetParams> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| {
            anyhow::anyhow!(
                "{} at byte {}: no header line found",
                path.display(),
                bytes.len()
            )
        })?;
    let header: NetHeader = serde_json::from_slice(&bytes[..newline]).map_err(|e| {
        let text = String::from_utf8_lossy(&bytes[..newline]);
        let offset = byte_offset(&text, e.line(), e.column());
        anyhow::anyhow!("{} at byte {offset}: malformed header: {e}", path.display())
    })?;
    if header.format != NET_FORMAT_TAG {
        bail!(
            "{} at byte 0: format tag {:?}, expected {NET_FORMAT_TAG:?}",
            path.display(),
            header.format
        );
    }
    let want = format!("leaky_relu_{LEAKY_SLOPE}");
    if header.activation != want {
        bail!(
            "{} declares activation {:?}, this build implements {want:?}",
            path.display(),
            header.activation
        );
    }
    let payload = &bytes[newline + 1..];
    if payload.len() != header.param_count * 8 {
        bail!(
            "{} at byte {}: payload is {} bytes, header declares {} parameters ({} bytes)",
            path.display(),
            newline + 1,
            payload.len(),
            header.param_count,
            header.param_count * 8
        );
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
        .collect();
    Ok(DeformNetParams::from_flat(header.hyper, params)?)
}

/// Training history as CSV: `epoch,sampled_loss,fullset_loss` with an
/// empty third field when the full-set loss was not recorded.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,sampled_loss,fullset_loss\n");
    for rec in history {
        match rec.fullset_loss {
            Some(f) => out.push_str(&format!("{},{},{}\n", rec.epoch, rec.sampled_loss, f)),
            None => out.push_str(&format!("{},{},\n", rec.epoch, rec.sampled_loss)),
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Pretty-printed JSON for any serializable report.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
