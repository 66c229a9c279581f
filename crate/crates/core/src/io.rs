//! On-disk formats: model containers, mask bitsets, tensors and compiled
//! networks. All binary data is little-endian.
//!
//! * model: text header (`kgs3d-model 1`, `arch <json>`, one `param <name> <len>`
//!   line per tensor, `end_header`) followed by the parameters as f64.
//! * masks: `GMSK`, u16 version, u16 layer count; per layer a scheme byte,
//!   three reserved bytes, u32 `M N Kh Kw Kd gM gN`, u32 unit count and the
//!   keep bits packed LSB-first. KGS bits are in `(p, q, d, h, w)` row-major
//!   order, Vanilla in `(p, q)`, Filter in `m`.
//! * tensor: text header (`kgs3d-tensor 1`, `dims b c d h w`, `dtype f32le`,
//!   `end_header`) followed by the values as f32.
//! * network (`.cws`): `CWSM`, u16 version, u16 layer count, u32 input
//!   `c d h w`; per layer u32 stride and padding `(d, h, w)`, u8 relu, u8 has
//!   bias, u16 reserved, u32 bias count, f32 biases, u32 store length and the
//!   CWS store bytes.

use std::fs;
use std::path::Path;

use crate::compile::CompactWeightStore;
use crate::error::{invalid, Error, Result};
use crate::exec::{CompiledLayer, Network};
use crate::sparsity::{unit_count, GroupMask, Scheme};
use crate::tensor::{ConvSpec, FeatureDims, FeatureMap, GroupPartition, KernelDims};
use crate::train::{ArchSpec, ToyModel};

pub const MASK_MAGIC: [u8; 4] = *b"GMSK";
pub const NETWORK_MAGIC: [u8; 4] = *b"CWSM";
const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("need {n} bytes, {} left", self.buf.len() - self.pos)));
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

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            self.pos -= 4;
            return Err(self.err(format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            self.pos -= 2;
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }

    /// Text header lines up to `end_header`.
    fn header(&mut self) -> Result<Vec<&'a str>> {
        let mut lines = Vec::new();
        loop {
            let rest = &self.buf[self.pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| self.err("unterminated text header"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| self.err("header is not UTF-8"))?;
            self.pos += nl + 1;
            if line == "end_header" {
                return Ok(lines);
            }
            lines.push(line);
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| invalid(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn fields<'a>(line: &'a str, key: &str, count: usize) -> Result<Vec<&'a str>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(invalid(format!("expected `{key}` header line, got `{line}`")));
    }
    let v: Vec<&str> = it.collect();
    if v.len() != count {
        return Err(invalid(format!("`{key}` line needs {count} fields, got `{line}`")));
    }
    Ok(v)
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| invalid(format!("`{s}` is not a non-negative integer")))
}

pub fn model_to_bytes(model: &ToyModel) -> Result<Vec<u8>> {
    let mut head = format!("kgs3d-model {FORMAT_VERSION}\narch {}\n", serde_json::to_string(model.arch())?);
    for (name, p) in model.param_names().iter().zip(model.params()) {
        head.push_str(&format!("param {name} {}\n", p.len()));
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    for p in model.params() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = Reader::new(bytes);
    let head = r.header()?;
    if head.first().copied() != Some("kgs3d-model 1") {
        return Err(Error::Format { offset: 0, message: "not a kgs3d model container".into() });
    }
    let arch_line = head.get(1).and_then(|l| l.strip_prefix("arch ")).ok_or_else(|| invalid("missing `arch` header line"))?;
    let arch: ArchSpec = serde_json::from_str(arch_line)?;
    let mut model = ToyModel::new(&arch, 0)?;
    let names = model.param_names();
    let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    if head.len() != 2 + names.len() {
        return Err(invalid(format!("expected {} param lines, got {}", names.len(), head.len() - 2)));
    }
    for ((line, name), &len) in head[2..].iter().zip(&names).zip(&lens) {
        let f = fields(line, "param", 2)?;
        if f[0] != name || parse_usize(f[1])? != len {
            return Err(invalid(format!("param line `{line}` does not match {name} ({len})")));
        }
    }
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    r.finish()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &ToyModel) -> Result<()> {
    Ok(fs::write(path, model_to_bytes(model)?)?)
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    model_from_bytes(&fs::read(path)?)
}

/// Unit index of the `i`-th bit in file order.
fn file_order(scheme: Scheme, part: &GroupPartition) -> Vec<usize> {
    let k = part.dims;
    match scheme {
        Scheme::Kgs => {
            let ks = k.kernel_volume();
            let mut v = Vec::with_capacity(unit_count(scheme, part));
            for g in 0..part.p * part.q {
                for d in 0..k.kd {
                    for h in 0..k.kh {
                        for w in 0..k.kw {
                            v.push(g * ks + k.location(h, w, d));
                        }
                    }
                }
            }
            v
        }
        _ => (0..unit_count(scheme, part)).collect(),
    }
}

pub fn masks_to_bytes(masks: &[GroupMask]) -> Result<Vec<u8>> {
    let mut out = MASK_MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let n = u16::try_from(masks.len()).map_err(|_| invalid("too many layers"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for m in masks {
        let p = &m.partition;
        out.extend_from_slice(&[m.scheme.code(), 0, 0, 0]);
        for v in [p.dims.m, p.dims.n, p.dims.kh, p.dims.kw, p.dims.kd, p.g_m, p.g_n, m.keep.len()] {
            put_u32(&mut out, v)?;
        }
        let mut bits = vec![0u8; m.keep.len().div_ceil(8)];
        for (i, u) in file_order(m.scheme, p).into_iter().enumerate() {
            if m.keep[u] {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
    }
    Ok(out)
}

pub fn masks_from_bytes(bytes: &[u8]) -> Result<Vec<GroupMask>> {
    let mut r = Reader::new(bytes);
    r.magic(&MASK_MAGIC)?;
    r.version()?;
    let n = r.u16()? as usize;
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let scheme = Scheme::from_code(r.u8()?).ok_or_else(|| Error::Format { offset: at, message: "unknown scheme code".into() })?;
        r.take(3)?;
        let mut v = [0usize; 8];
        for x in &mut v {
            *x = r.usize()?;
        }
        let part = GroupPartition::new(KernelDims::new(v[0], v[1], v[2], v[3], v[4]), v[5], v[6])
            .map_err(|e| Error::Format { offset: at, message: e.to_string() })?;
        if v[7] != unit_count(scheme, &part) {
            return Err(Error::Format { offset: at, message: format!("unit count {} does not match the geometry", v[7]) });
        }
        let bits = r.take(v[7].div_ceil(8))?;
        let mut keep = vec![false; v[7]];
        for (i, u) in file_order(scheme, &part).into_iter().enumerate() {
            keep[u] = bits[i / 8] >> (i % 8) & 1 == 1;
        }
        masks.push(GroupMask::new(scheme, part, keep)?);
    }
    r.finish()?;
    Ok(masks)
}

pub fn save_masks(path: &Path, masks: &[GroupMask]) -> Result<()> {
    Ok(fs::write(path, masks_to_bytes(masks)?)?)
}

pub fn load_masks(path: &Path) -> Result<Vec<GroupMask>> {
    masks_from_bytes(&fs::read(path)?)
}

pub fn tensor_to_bytes(t: &FeatureMap<f32>) -> Vec<u8> {
    let d = t.dims();
    let mut out = format!(
        "kgs3d-tensor {FORMAT_VERSION}\ndims {} {} {} {} {}\ndtype f32le\nend_header\n",
        d.batch, d.channels, d.depth, d.height, d.width
    )
    .into_bytes();
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<FeatureMap<f32>> {
    let mut r = Reader::new(bytes);
    let head = r.header()?;
    if head.len() != 3 || head[0] != "kgs3d-tensor 1" || head[2] != "dtype f32le" {
        return Err(Error::Format { offset: 0, message: "not a kgs3d f32 tensor".into() });
    }
    let d = fields(head[1], "dims", 5)?.into_iter().map(parse_usize).collect::<Result<Vec<_>>>()?;
    let dims = FeatureDims::new(d[0], d[1], d[2], d[3], d[4]);
    dims.validate()?;
    let mut data = Vec::with_capacity(dims.len());
    for _ in 0..dims.len() {
        data.push(r.f32()?);
    }
    r.finish()?;
    FeatureMap::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &FeatureMap<f32>) -> Result<()> {
    Ok(fs::write(path, tensor_to_bytes(t))?)
}

pub fn read_tensor(path: &Path) -> Result<FeatureMap<f32>> {
    tensor_from_bytes(&fs::read(path)?)
}

pub fn network_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut out = NETWORK_MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let n = u16::try_from(net.layers.len()).map_err(|_| invalid("too many layers"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for v in net.input {
        put_u32(&mut out, v)?;
    }
    for l in &net.layers {
        for v in l.spec.stride.iter().chain(&l.spec.padding) {
            put_u32(&mut out, *v)?;
        }
        out.extend_from_slice(&[l.relu as u8, l.spec.bias.is_some() as u8, 0, 0]);
        let bias = l.spec.bias.as_deref().unwrap_or(&[]);
        put_u32(&mut out, bias.len())?;
        for &b in bias {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
        let store = l.store.to_bytes();
        put_u32(&mut out, store.len())?;
        out.extend_from_slice(&store);
    }
    Ok(out)
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes);
    r.magic(&NETWORK_MAGIC)?;
    r.version()?;
    let n = r.u16()? as usize;
    let mut input = [0usize; 4];
    for v in &mut input {
        *v = r.usize()?;
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let mut sp = [0usize; 6];
        for v in &mut sp {
            *v = r.usize()?;
        }
        let flags = r.take(4)?;
        let (relu, has_bias) = (flags[0] == 1, flags[1] == 1);
        if flags[0] > 1 || flags[1] > 1 {
            r.pos -= 4;
            return Err(r.err("flag bytes must be 0 or 1"));
        }
        let nb = r.usize()?;
        let mut bias = Vec::with_capacity(nb.min(1 << 16));
        for _ in 0..nb {
            bias.push(r.f32()? as f64);
        }
        let len = r.usize()?;
        let at = r.pos;
        let store = CompactWeightStore::from_bytes(r.take(len)?).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format { offset: at + offset, message },
            e => e,
        })?;
        let mut spec = ConvSpec::new([sp[0], sp[1], sp[2]], [sp[3], sp[4], sp[5]]);
        if has_bias {
            if nb != store.dims.m {
                return Err(r.err(format!("{nb} biases for {} filters", store.dims.m)));
            }
            spec = spec.with_bias(bias);
        }
        layers.push(CompiledLayer { store, spec, relu });
    }
    r.finish()?;
    Ok(Network { input, layers })
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    Ok(fs::write(path, network_to_bytes(net)?)?)
}

pub fn load_network(path: &Path) -> Result<Network> {
    network_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::compile_network;
    use crate::tensor::partition;

    #[test]
    fn model_round_trip() {
        let m = ToyModel::new(&ArchSpec::tiny3d(), 3).unwrap();
        let b = model_to_bytes(&m).unwrap();
        let back = model_from_bytes(&b).unwrap();
        assert_eq!(back.params(), m.params());
        assert!(model_from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn mask_bit_order_is_pqdhw() {
        let dims = KernelDims::new(1, 1, 1, 2, 3);
        let part = partition(dims, 1, 1).unwrap();
        let mut keep = vec![false; 6];
        // internal location index of (h=0, w=1, d=0) is 3; in (d, h, w) order it is bit 1
        keep[dims.location(0, 1, 0)] = true;
        let b = masks_to_bytes(&[GroupMask::new(Scheme::Kgs, part, keep.clone()).unwrap()]).unwrap();
        assert_eq!(*b.last().unwrap(), 0b10);
        assert_eq!(masks_from_bytes(&b).unwrap()[0].keep, keep);
    }

    #[test]
    fn masks_round_trip_all_schemes() {
        let dims = KernelDims::new(6, 5, 3, 2, 3);
        let part = partition(dims, 4, 2).unwrap();
        let masks: Vec<GroupMask> = Scheme::ALL
            .iter()
            .map(|&s| {
                let part = if s == Scheme::Filter { partition(dims, 1, 1).unwrap() } else { part };
                let n = unit_count(s, &part);
                GroupMask::new(s, part, (0..n).map(|i| i % 3 != 1).collect()).unwrap()
            })
            .collect();
        let b = masks_to_bytes(&masks).unwrap();
        assert_eq!(masks_from_bytes(&b).unwrap(), masks);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(masks_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn tensor_round_trip() {
        let d = FeatureDims::new(1, 2, 1, 2, 3);
        let t = FeatureMap::new(d, (0..12).map(|i| i as f32 * 0.5).collect()).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(tensor_from_bytes(&b).unwrap(), t);
        assert!(tensor_from_bytes(&b[..b.len() - 2]).is_err());
    }

    #[test]
    fn network_round_trip() {
        let m = ToyModel::new(&ArchSpec::tiny3d(), 1).unwrap();
        let masks: Vec<GroupMask> = m
            .convs()
            .iter()
            .map(|c| GroupMask::from_weights(&c.weights, &partition(c.weights.dims(), 4, 4).unwrap(), Scheme::Kgs).unwrap())
            .collect();
        let mut net = compile_network(&m, &masks, true).unwrap();
        for l in &mut net.layers {
            let b: Vec<f64> = l.spec.bias.as_ref().unwrap().iter().map(|&v| v as f32 as f64).collect();
            l.spec.bias = Some(b);
        }
        let b = network_to_bytes(&net).unwrap();
        assert_eq!(network_from_bytes(&b).unwrap(), net);
        let mut bad = b.clone();
        let at = b.windows(4).position(|w| w == b"CWS3").unwrap();
        bad[at] ^= 0xff;
        assert!(network_from_bytes(&bad).is_err());
    }
}
