//! Checkpoint container.
//!
//! One ASCII header line, then raw data:
//!
//! ```text
//! depthlab-checkpoint v1 readin:NxD block.0.0:NxN ... readout:1xN\n
//! <little-endian f64 values, tensors in header order, each row-major>
//! ```
//!
//! Tensor order is read-in, blocks by `(layer, k)`, read-out. The header
//! only records shapes; the configuration travels separately.

use std::io::{BufRead, BufReader, Read, Write};

use super::{Network, Params};
use crate::error::{Error, Result};
use crate::param::ParamConfig;

const MAGIC: &str = "depthlab-checkpoint v1";

pub fn save_checkpoint(net: &Network, mut out: impl Write) -> Result<()> {
    let mut header = String::from(MAGIC);
    for (id, m) in net.params.iter() {
        header.push_str(&format!(" {}:{}x{}", id.name(), m.rows(), m.cols()));
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;
    for (_, m) in net.params.iter() {
        for v in m.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(cfg: &ParamConfig, input: impl Read) -> Result<Network> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let mut fields = header.trim_end().split(' ');
    let magic = format!(
        "{} {}",
        fields.next().unwrap_or(""),
        fields.next().unwrap_or("")
    );
    if magic != MAGIC {
        return Err(Error::Config("not a depthlab checkpoint".into()));
    }
    let mut params = Params::zeros(cfg);
    let expected: Vec<String> = params
        .iter()
        .map(|(id, m)| format!("{}:{}x{}", id.name(), m.rows(), m.cols()))
        .collect();
    let found: Vec<&str> = fields.collect();
    if found != expected {
        return Err(Error::Shape(format!(
            "checkpoint tensors [{}] do not match configuration [{}]",
            found.join(" "),
            expected.join(" ")
        )));
    }
    let mut buf = [0u8; 8];
    for (_, m) in params.iter_mut() {
        for v in m.data_mut() {
            reader.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Network::from_params(cfg.clone(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::param::Scheme;
    use crate::resnet::init_network;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = ParamConfig::new(5, 3, 2, Scheme::MuPSqrtL);
        cfg.layers_per_block = 2;
        let net = init_network(&cfg, &RngStream::new(4, 4)).unwrap();
        let mut bytes = Vec::new();
        save_checkpoint(&net, &mut bytes).unwrap();
        let back = load_checkpoint(&cfg, bytes.as_slice()).unwrap();
        assert_eq!(back, net);
        let first = bytes.split(|&b| b == b'\n').next().unwrap();
        assert!(std::str::from_utf8(first)
            .unwrap()
            .starts_with("depthlab-checkpoint v1 readin:5x2 block.0.0:5x5"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = ParamConfig::new(5, 3, 2, Scheme::MuPSqrtL);
        let net = init_network(&cfg, &RngStream::new(4, 4)).unwrap();
        let mut bytes = Vec::new();
        save_checkpoint(&net, &mut bytes).unwrap();
        let other = ParamConfig::new(6, 3, 2, Scheme::MuPSqrtL);
        assert!(load_checkpoint(&other, bytes.as_slice()).is_err());
        assert!(load_checkpoint(&cfg, &b"garbage\n"[..]).is_err());
    }
}
