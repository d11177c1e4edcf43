//! SuperPixel Gradient Query: building the offline query set.
//!
//! Estimates victim sample gradients by forward differences — per pixel as
//! an expensive baseline, per superpixel-channel as the cheap attack path —
//! and caches base responses, perturbed responses, and gradients into a
//! self-describing file so proxies can be retrained without re-querying.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::PROB_FLOOR;
use crate::oracle::{QueryMode, QueryResponse, VictimOracle};
use crate::superpixel::{SegMethod, SegSpec, Segmentation};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Fraction of images whose gradients are queried (the rest get a single
/// label query), reconciling per-image query cost with reported totals.
pub const DEFAULT_GRAD_FRACTION: f64 = 0.09;

/// What to do with a superpixel whose perturbed hard-label response flips
/// away from the base label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelFlipPolicy {
    /// Difference the −log(1−ŷ) surrogate (default; flips are rare at ε=1e-5).
    SurrogateLog,
    /// Zero that superpixel's gradient, keep the cached response.
    Zero,
    /// Alias of `Zero` at this layer: the superpixel contributes no
    /// gradient signal but its response stays cached.
    Skip,
}

impl LabelFlipPolicy {
    pub fn name(self) -> &'static str {
        match self {
            LabelFlipPolicy::SurrogateLog => "surrogate_log",
            LabelFlipPolicy::Zero => "zero",
            LabelFlipPolicy::Skip => "skip",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "surrogate_log" => Some(LabelFlipPolicy::SurrogateLog),
            "zero" => Some(LabelFlipPolicy::Zero),
            "skip" => Some(LabelFlipPolicy::Skip),
            _ => None,
        }
    }
}

/// Scalar functional differenced by Eq-style forward differences: the loss
/// of the response against the base label, aligning the victim-side
/// gradient with the proxy-side cross-entropy.
pub fn scalarize(resp: &QueryResponse, base_label: usize) -> f64 {
    match (&resp.probs, resp.mode) {
        (Some(probs), _) => -probs[base_label].max(PROB_FLOOR).ln(),
        (None, _) => {
            if resp.top_label == base_label {
                -resp.top_prob.max(PROB_FLOOR).ln()
            } else {
                -(1.0 - resp.top_prob).max(PROB_FLOOR).ln()
            }
        }
    }
}

/// Gradient payload of a record; absent for label-only images.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPart {
    pub segmentation: Segmentation,
    pub channels: usize,
    /// J×C superpixel gradients, index `j * channels + c`, mean convention
    /// (the Eq-2 sum divided by N_j).
    pub g: Vec<f64>,
    /// Cached perturbed responses f_v(x_j^c), same J×C layout.
    pub perturbed: Vec<QueryResponse>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGradientRecord {
    pub image_id: String,
    pub base: QueryResponse,
    pub epsilon: f64,
    pub gradient: Option<GradientPart>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySetHeader {
    pub epsilon: f64,
    pub seg: SegSpec,
    pub mode: QueryMode,
    pub policy: LabelFlipPolicy,
    /// Perturbed queries are never clipped to [0,1]; recorded for honesty.
    pub clip_inputs: bool,
    pub victim_fingerprint: u32,
    pub seed: u64,
    pub grad_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub header: QuerySetHeader,
    pub records: Vec<SuperpixelGradientRecord>,
    /// Oracle ledger total at build completion.
    pub ledger_total: u64,
}

/// Queries issued when building one gradient record: one per
/// superpixel-channel plus the base query.
pub fn queries_for_record(channels: usize, j: usize) -> u64 {
    (channels * j) as u64 + 1
}

/// Forward-difference quotient with the mean convention: the raw
/// difference over ε, divided by the superpixel's pixel count. The
/// arithmetic core of both estimators below; exact for affine functionals.
#[inline]
pub fn fd_mean_quotient(f_perturbed: f64, f_base: f64, epsilon: f64, n_j: usize) -> f64 {
    (f_perturbed - f_base) / epsilon / n_j as f64
}

/// Pixel-level forward differences of an arbitrary scalar functional.
pub fn pixel_fd_of<F>(mut f: F, image: &Tensor, epsilon: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let f0 = f(image)?;
    let mut grad = Tensor::zeros_like(image);
    let mut x = image.clone();
    for i in 0..image.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let fi = f(&x)?;
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = fd_mean_quotient(fi, f0, epsilon, 1);
    }
    grad.check_finite("pixel_fd_of")?;
    Ok(grad)
}

/// Superpixel-level forward differences of an arbitrary scalar functional,
/// mean convention, J×C layout `j * channels + c`. Iteration order matches
/// the oracle-backed estimator exactly.
pub fn superpixel_fd_of<F>(
    mut f: F,
    image: &Tensor,
    seg: &Segmentation,
    epsilon: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let c = image.shape()[0];
    let plane = seg.height * seg.width;
    let f0 = f(image)?;
    let members = seg.member_lists();
    let mut g = vec![0.0; seg.j * c];
    let mut x = image.clone();
    for (j, pix_list) in members.iter().enumerate() {
        for ch in 0..c {
            for &pix in pix_list {
                x.data_mut()[ch * plane + pix] += epsilon;
            }
            let fj = f(&x)?;
            for &pix in pix_list {
                x.data_mut()[ch * plane + pix] = image.data()[ch * plane + pix];
            }
            g[j * c + ch] = fd_mean_quotient(fj, f0, epsilon, pix_list.len());
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("superpixel_fd_of gradients".into()));
    }
    Ok(g)
}

/// Pixel-level forward-difference gradient (the expensive baseline):
/// C·H·W + 1 queries.
pub fn pixel_fd_gradient(
    oracle: &VictimOracle,
    image_id: &str,
    image: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let base = oracle.query_tagged(image_id, image)?;
    let p = base.top_label;
    let f0 = scalarize(&base, p);
    let mut grad = Tensor::zeros_like(image);
    let mut x = image.clone();
    for i in 0..image.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let resp = oracle.query_tagged(image_id, &x)?;
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = fd_mean_quotient(scalarize(&resp, p), f0, epsilon, 1);
    }
    grad.check_finite("pixel_fd_gradient")?;
    Ok(grad)
}

/// Superpixel-level forward-difference gradient record: C·J + 1 queries.
/// Stored gradients use the mean convention (raw difference over N_j).
pub fn superpixel_fd_gradient(
    oracle: &VictimOracle,
    image_id: &str,
    image: &Tensor,
    seg: &Segmentation,
    epsilon: f64,
    policy: LabelFlipPolicy,
) -> Result<SuperpixelGradientRecord> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                context: "superpixel_fd_gradient".into(),
                expected: vec![3],
                got: other.to_vec(),
            })
        }
    };
    if seg.width != w || seg.height != h {
        return Err(Error::ShapeMismatch {
            context: "segmentation vs image".into(),
            expected: vec![h, w],
            got: vec![seg.height, seg.width],
        });
    }
    let base = oracle.query_tagged(image_id, image)?;
    let p = base.top_label;
    let f0 = scalarize(&base, p);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); seg.j];
    for (pix, &l) in seg.labels.iter().enumerate() {
        members[l as usize].push(pix);
    }

    let mut g = vec![0.0; seg.j * c];
    let mut perturbed = Vec::with_capacity(seg.j * c);
    let mut x = image.clone();
    for (j, pix_list) in members.iter().enumerate() {
        for ch in 0..c {
            for &pix in pix_list {
                x.data_mut()[ch * h * w + pix] += epsilon;
            }
            let resp = oracle.query_tagged(image_id, &x)?;
            for &pix in pix_list {
                x.data_mut()[ch * h * w + pix] = image.data()[ch * h * w + pix];
            }
            let flipped = resp.probs.is_none() && resp.top_label != p;
            g[j * c + ch] = if flipped && policy != LabelFlipPolicy::SurrogateLog {
                0.0
            } else {
                fd_mean_quotient(scalarize(&resp, p), f0, epsilon, pix_list.len())
            };
            perturbed.push(resp);
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("superpixel gradients".into()));
    }
    Ok(SuperpixelGradientRecord {
        image_id: image_id.to_string(),
        base,
        epsilon,
        gradient: Some(GradientPart {
            segmentation: seg.clone(),
            channels: c,
            g,
            perturbed,
        }),
    })
}

/// Builds the offline query set: every image gets a base query; a
/// seed-selected fraction additionally gets a full superpixel gradient
/// record.
#[allow(clippy::too_many_arguments)]
pub fn build_query_set(
    oracle: &VictimOracle,
    images: &[(String, Tensor)],
    seg: &SegSpec,
    epsilon: f64,
    policy: LabelFlipPolicy,
    grad_fraction: f64,
    seed: u64,
) -> Result<QuerySet> {
    if images.is_empty() {
        return Err(Error::Empty("build_query_set needs at least one image".into()));
    }
    if !(0.0..=1.0).contains(&grad_fraction) {
        return Err(Error::InvalidArgument("grad_fraction must lie in [0,1]".into()));
    }
    let n = images.len();
    let n_grad = ((grad_fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut take_grad = vec![false; n];
    for &i in order.iter().take(n_grad) {
        take_grad[i] = true;
    }

    let mut records = Vec::with_capacity(n);
    for (i, (id, image)) in images.iter().enumerate() {
        let rec = if take_grad[i] {
            let segmentation = seg
                .segment(image)
                .map_err(|e| Error::InvalidArgument(format!("image {id}: {e}")))?;
            superpixel_fd_gradient(oracle, id, image, &segmentation, epsilon, policy)
                .map_err(|e| Error::InvalidArgument(format!("image {id}: {e}")))?
        } else {
            SuperpixelGradientRecord {
                image_id: id.clone(),
                base: oracle
                    .query_tagged(id, image)
                    .map_err(|e| Error::InvalidArgument(format!("image {id}: {e}")))?,
                epsilon,
                gradient: None,
            }
        };
        records.push(rec);
    }
    Ok(QuerySet {
        header: QuerySetHeader {
            epsilon,
            seg: seg.clone(),
            mode: oracle.mode(),
            policy,
            clip_inputs: false,
            victim_fingerprint: oracle.fingerprint(),
            seed,
            grad_fraction,
        },
        records,
        ledger_total: oracle.ledger().total(),
    })
}

// ---------------------------------------------------------------------------
// File format: magic "SPSGQS1\n", version byte, length-prefixed UTF-8
// key-value header, then CRC32-protected records and a CRC32 trailer over
// the whole stream.

pub const QS_MAGIC: &[u8; 8] = b"SPSGQS1\n";
const QS_VERSION: u8 = 1;

struct CrcWriter<W: Write> {
    inner: W,
    crc: crc32fast::Hasher,
}

impl<W: Write> CrcWriter<W> {
    fn new(inner: W) -> Self {
        Self {
            inner,
            crc: crc32fast::Hasher::new(),
        }
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.crc.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u16(buf, s.len() as u16);
    buf.extend_from_slice(s.as_bytes());
}

fn put_response(buf: &mut Vec<u8>, r: &QueryResponse) {
    buf.push(match r.mode {
        QueryMode::Probability => 0,
        QueryMode::HardLabel => 1,
    });
    match &r.probs {
        Some(p) => {
            buf.push(1);
            put_u32(buf, p.len() as u32);
            for v in p {
                put_f64(buf, *v);
            }
        }
        None => buf.push(0),
    }
    put_u32(buf, r.top_label as u32);
    put_f64(buf, r.top_prob);
}

fn header_text(h: &QuerySetHeader) -> String {
    // canonical order, one key = value per line
    format!(
        "clip_inputs = {}\nepsilon = {}\ngrad_fraction = {}\nmode = {}\npolicy = {}\nseed = {}\nsegmentation = {}\nvictim_fingerprint = {}\n",
        h.clip_inputs,
        h.epsilon,
        h.grad_fraction,
        h.mode.name(),
        h.policy.name(),
        h.seed,
        h.seg.to_header_string(),
        h.victim_fingerprint
    )
}

fn parse_header(text: &str) -> Result<QuerySetHeader> {
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("header missing {k:?}")))
    };
    Ok(QuerySetHeader {
        epsilon: get("epsilon")?.parse().map_err(|_| Error::Format("bad epsilon".into()))?,
        seg: SegSpec::from_header_string(&get("segmentation")?)?,
        mode: QueryMode::from_name(&get("mode")?)
            .ok_or_else(|| Error::Format("bad mode".into()))?,
        policy: LabelFlipPolicy::from_name(&get("policy")?)
            .ok_or_else(|| Error::Format("bad policy".into()))?,
        clip_inputs: get("clip_inputs")? == "true",
        victim_fingerprint: get("victim_fingerprint")?
            .parse()
            .map_err(|_| Error::Format("bad fingerprint".into()))?,
        seed: get("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
        grad_fraction: get("grad_fraction")?
            .parse()
            .map_err(|_| Error::Format("bad grad_fraction".into()))?,
    })
}

fn encode_record(rec: &SuperpixelGradientRecord) -> Vec<u8> {
    let mut buf = Vec::new();
    put_str(&mut buf, &rec.image_id);
    put_f64(&mut buf, rec.epsilon);
    put_response(&mut buf, &rec.base);
    match &rec.gradient {
        None => buf.push(0),
        Some(gp) => {
            buf.push(1);
            let seg = &gp.segmentation;
            buf.push(match seg.method {
                SegMethod::Grid => 0,
                SegMethod::Slic => 1,
                SegMethod::Felzenszwalb => 2,
                SegMethod::Quickshift => 3,
            });
            let params: String = seg
                .params
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ");
            put_str(&mut buf, &params);
            let pgm = crate::pnm::encode_pgm(
                seg.width,
                seg.height,
                65535,
                &seg.labels.iter().map(|&l| l as u16).collect::<Vec<_>>(),
            )
            .expect("label map fits pgm");
            put_u32(&mut buf, pgm.len() as u32);
            buf.extend_from_slice(&pgm);
            put_u32(&mut buf, seg.j as u32);
            put_u32(&mut buf, gp.channels as u32);
            for v in &gp.g {
                put_f64(&mut buf, *v);
            }
            for r in &gp.perturbed {
                put_response(&mut buf, r);
            }
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "truncated record at byte {} (need {})",
                self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        Ok(String::from_utf8_lossy(self.take(n)?).into_owned())
    }

    fn response(&mut self) -> Result<QueryResponse> {
        let mode = match self.u8()? {
            0 => QueryMode::Probability,
            1 => QueryMode::HardLabel,
            m => return Err(Error::Format(format!("bad response mode byte {m}"))),
        };
        let probs = if self.u8()? == 1 {
            let k = self.u32()? as usize;
            let mut p = Vec::with_capacity(k);
            for _ in 0..k {
                p.push(self.f64()?);
            }
            Some(p)
        } else {
            None
        };
        Ok(QueryResponse {
            mode,
            probs,
            top_label: self.u32()? as usize,
            top_prob: self.f64()?,
        })
    }
}

fn decode_record(buf: &[u8]) -> Result<SuperpixelGradientRecord> {
    let mut c = Cursor { buf, pos: 0 };
    let image_id = c.str()?;
    let epsilon = c.f64()?;
    let base = c.response()?;
    let gradient = if c.u8()? == 1 {
        let method = match c.u8()? {
            0 => SegMethod::Grid,
            1 => SegMethod::Slic,
            2 => SegMethod::Felzenszwalb,
            3 => SegMethod::Quickshift,
            m => return Err(Error::Format(format!("bad segmentation method byte {m}"))),
        };
        let params: Vec<(String, String)> = c
            .str()?
            .split_whitespace()
            .filter_map(|t| t.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let pgm_len = c.u32()? as usize;
        let pnm = crate::pnm::decode_pnm(c.take(pgm_len)?)?;
        let raw: Vec<usize> = pnm.samples.iter().map(|&s| s as usize).collect();
        let seg = Segmentation::from_labels(pnm.width, pnm.height, &raw, method, params)?;
        let j = c.u32()? as usize;
        let channels = c.u32()? as usize;
        if j != seg.j {
            return Err(Error::Integrity(format!(
                "record {image_id}: label map has {} superpixels, header says {j}",
                seg.j
            )));
        }
        let mut g = Vec::with_capacity(j * channels);
        for _ in 0..j * channels {
            g.push(c.f64()?);
        }
        let mut perturbed = Vec::with_capacity(j * channels);
        for _ in 0..j * channels {
            perturbed.push(c.response()?);
        }
        Some(GradientPart {
            segmentation: seg,
            channels,
            g,
            perturbed,
        })
    } else {
        None
    };
    if c.pos != buf.len() {
        return Err(Error::Integrity("trailing bytes in record".into()));
    }
    Ok(SuperpixelGradientRecord {
        image_id,
        base,
        epsilon,
        gradient,
    })
}

pub fn save_query_set(qs: &QuerySet, path: &Path) -> Result<()> {
    let mut w = CrcWriter::new(std::io::BufWriter::new(std::fs::File::create(path)?));
    w.write(QS_MAGIC)?;
    w.write(&[QS_VERSION])?;
    let header = header_text(&qs.header);
    w.write(&(header.len() as u32).to_le_bytes())?;
    w.write(header.as_bytes())?;
    w.write(&(qs.records.len() as u32).to_le_bytes())?;
    w.write(&qs.ledger_total.to_le_bytes())?;
    for rec in &qs.records {
        let payload = encode_record(rec);
        w.write(&(payload.len() as u32).to_le_bytes())?;
        w.write(&payload)?;
        w.write(&crc32fast::hash(&payload).to_le_bytes())?;
    }
    let trailer = w.crc.clone().finalize();
    w.inner.write_all(&trailer.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

pub fn load_query_set(path: &Path) -> Result<QuerySet> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < QS_MAGIC.len() + 5 {
        return Err(Error::Integrity("file too short".into()));
    }
    // whole-stream CRC trailer first: no partial results from corrupt files
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("trailer checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(QS_MAGIC.len())? != QS_MAGIC {
        return Err(Error::Format("bad query-set magic".into()));
    }
    let version = c.u8()?;
    if version != QS_VERSION {
        return Err(Error::Format(format!("unsupported query-set version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header = parse_header(&String::from_utf8_lossy(c.take(hlen)?))?;
    let nrec = c.u32()? as usize;
    let ledger_total = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let mut records = Vec::with_capacity(nrec);
    for i in 0..nrec {
        let plen = c.u32()? as usize;
        let payload = c.take(plen)?;
        let crc = c.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Integrity(format!("record {i}: checksum mismatch")));
        }
        let rec = decode_record(payload)?;
        if rec.base.mode != header.mode {
            return Err(Error::Integrity(format!(
                "record {}: response mode disagrees with header policy",
                rec.image_id
            )));
        }
        records.push(rec);
    }
    if c.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after records".into()));
    }
    Ok(QuerySet {
        header,
        records,
        ledger_total,
    })
}
