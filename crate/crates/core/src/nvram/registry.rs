// SPDX-License-Identifier: Apache-2.0

//! Cloud-side registry of expected (enclave, VM) measurement pairs and the
//! remote binding check.
//!
//! Registry file: one record per line,
//!
//! ```text
//! <mrenclave_hex> <vm_digest_hex> <label> [<mrsigner_hex>]
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. The file is only
//! appended to, under an exclusive lock on `<registry>.lock`.
//!
//! The trusted channel is modelled as an HMAC-SHA256 tag over the report
//! under a key shared by launcher and cloud.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use hmac::{Hmac, Mac};
use sha2::Sha256;
use subtle::ConstantTimeEq;

use crate::enclave::{EnclaveIdentity, Measurement};

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub mrenclave: Measurement,
    pub vm_digest: [u8; 32],
    pub label: String,
    /// When present the check also pins the enclave signer.
    pub mrsigner: Option<Measurement>,
}

impl RegistryEntry {
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {} {}", hex::encode(self.mrenclave), hex::encode(self.vm_digest), self.label);
        if let Some(m) = &self.mrsigner {
            s.push(' ');
            s.push_str(&hex::encode(m));
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(format!("expected 3 or 4 fields, found {}", fields.len()));
        }
        let digest = |s: &str| -> Result<[u8; 32], String> {
            let v = hex::decode(s).map_err(|e| e.to_string())?;
            v.try_into().map_err(|_| "digest must be 32 bytes".to_string())
        };
        Ok(RegistryEntry {
            mrenclave: digest(fields[0])?,
            vm_digest: digest(fields[1])?,
            label: fields[2].to_string(),
            mrsigner: fields.get(3).map(|s| digest(s)).transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    path: PathBuf,
}

impl Registry {
    pub fn open(path: impl AsRef<Path>) -> Self {
        Registry {
            path: path.as_ref().to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> io::Result<File> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.path.with_extension("lock"))?;
        lock.lock()?;
        Ok(lock)
    }

    pub fn append(&self, entry: &RegistryEntry) -> io::Result<()> {
        if entry.label.is_empty() || entry.label.contains(char::is_whitespace) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "label must be one non-empty word"));
        }
        let _lock = self.lock()?;
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", entry.to_line())?;
        f.sync_all()
    }

    pub fn entries(&self) -> io::Result<Vec<RegistryEntry>> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| RegistryEntry::parse_line(l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
            .collect()
    }

    /// Latest record for `label`.
    pub fn lookup(&self, label: &str) -> io::Result<Option<RegistryEntry>> {
        Ok(self.entries()?.into_iter().rev().find(|e| e.label == label))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ChannelKey(pub [u8; 32]);

impl std::fmt::Debug for ChannelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ChannelKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingReport {
    pub label: String,
    pub enclave_measurement: Measurement,
    pub enclave_signer: Measurement,
    pub vm_measurement: [u8; 32],
    pub channel_auth_tag: [u8; 32],
}

fn report_tag(key: &ChannelKey, label: &str, mrenclave: &[u8], mrsigner: &[u8], vm: &[u8]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&key.0).expect("HMAC takes any key length");
    mac.update(b"binding-report");
    mac.update(&(label.len() as u32).to_be_bytes());
    mac.update(label.as_bytes());
    mac.update(mrenclave);
    mac.update(mrsigner);
    mac.update(vm);
    mac.finalize().into_bytes().into()
}

impl BindingReport {
    pub fn new(key: &ChannelKey, label: &str, identity: &EnclaveIdentity, vm_digest: [u8; 32]) -> Self {
        BindingReport {
            label: label.to_string(),
            enclave_measurement: identity.mrenclave,
            enclave_signer: identity.mrsigner,
            vm_measurement: vm_digest,
            channel_auth_tag: report_tag(key, label, &identity.mrenclave, &identity.mrsigner, &vm_digest),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    MismatchEnclave,
    MismatchVm,
    BadChannel,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Ok => "OK",
            Verdict::MismatchEnclave => "MISMATCH_ENCLAVE",
            Verdict::MismatchVm => "MISMATCH_VM",
            Verdict::BadChannel => "BAD_CHANNEL",
        }
    }
}

pub fn remote_binding_check(report: &BindingReport, expected: &RegistryEntry, key: &ChannelKey) -> Verdict {
    let tag = report_tag(
        key,
        &report.label,
        &report.enclave_measurement,
        &report.enclave_signer,
        &report.vm_measurement,
    );
    if !bool::from(tag.ct_eq(&report.channel_auth_tag)) {
        return Verdict::BadChannel;
    }
    if report.enclave_measurement != expected.mrenclave
        || expected.mrsigner.is_some_and(|m| m != report.enclave_signer)
    {
        return Verdict::MismatchEnclave;
    }
    if report.vm_measurement != expected.vm_digest {
        return Verdict::MismatchVm;
    }
    Verdict::Ok
}
