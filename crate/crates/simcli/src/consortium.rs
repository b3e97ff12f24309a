//! The ledger participants and the provisioning handshake.

use devintegrity::applet::Applet;
use devintegrity::measure::{hash_parts, Digest, MeasurementReport};
use devintegrity::pdl::{ContractRecord, Ledger, Participant, Role, Signer};
use devintegrity::verifier::UpdateNotification;
use devintegrity::wire::{Frame, MsgType};

use crate::transport::Transport;
use crate::{Result, SimError};

/// One solution provider, one device vendor and one service provider with
/// keys derived from a seed.
pub struct Consortium {
    pub solution_provider: Signer,
    pub vendor: Signer,
    pub service_provider: Signer,
}

impl std::fmt::Debug for Consortium {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Consortium").finish_non_exhaustive()
    }
}

fn key_seed(name: &str, seed: u64) -> [u8; 32] {
    *hash_parts([b"participant-key\0".as_slice(), name.as_bytes(), &seed.to_be_bytes()]).as_bytes()
}

impl Consortium {
    pub fn new(seed: u64) -> Self {
        Consortium {
            solution_provider: Signer::from_seed("solution-provider", Role::SolutionProvider, &key_seed("sp", seed)),
            vendor: Signer::from_seed("device-vendor", Role::DeviceVendor, &key_seed("vendor", seed)),
            service_provider: Signer::from_seed("service-provider", Role::ServiceProvider, &key_seed("service", seed)),
        }
    }

    pub fn participants(&self) -> Vec<Participant> {
        vec![
            self.solution_provider.participant(),
            self.vendor.participant(),
            self.service_provider.participant(),
        ]
    }

    pub fn new_ledger(&self) -> Result<Ledger> {
        Ok(Ledger::in_memory(self.participants())?)
    }

    /// Vendor registers the known-good hash, endorsed by vendor and
    /// solution provider. Returns the block height.
    pub fn register_benchmark(&self, ledger: &mut Ledger, software_id: &str, hash: Digest) -> Result<u64> {
        let rec = ContractRecord::benchmark(software_id, hash, &self.vendor.participant().id);
        let body = ledger.next_block_body(std::slice::from_ref(&rec));
        let sigs = vec![self.vendor.endorse(&body), self.solution_provider.endorse(&body)];
        Ok(ledger.submit_contract(rec, sigs)?.height)
    }

    /// Update agreement: the solution provider confirms the new hash, the
    /// vendor executes the update contract, and the notification for the
    /// remote verifier is returned.
    pub fn ship_update(&self, ledger: &mut Ledger, software_id: &str, new_hash: Digest) -> Result<UpdateNotification> {
        let receipt = self.solution_provider.confirm(software_id, &new_hash);
        let rec = ContractRecord::software_update(
            software_id,
            new_hash,
            Some(receipt.clone()),
            &self.vendor.participant().id,
        );
        let body = ledger.next_block_body(std::slice::from_ref(&rec));
        let sigs = vec![self.vendor.endorse(&body), self.solution_provider.endorse(&body)];
        ledger.execute_update_contract(rec, sigs)?;
        Ok(UpdateNotification {
            software_id: software_id.to_owned(),
            new_hash,
            receipt,
        })
    }
}

/// Frames exchanged during one provisioning handshake, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub lines: Vec<String>,
}

impl Transcript {
    fn frame(&mut self, dir: &str, peer: &str, f: &Frame) {
        self.lines.push(format!("{dir} {peer} {:?} {} bytes", f.msg_type, f.payload.len()));
    }

    pub fn render(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Runs the provisioning handshake for one applet against every verifier
/// reachable through `transport`. The verifier compares the measurement
/// with the vendor's ledger benchmark before confirming.
pub fn provision(
    applet: &mut Applet,
    report: MeasurementReport,
    transport: &mut dyn Transport,
    transcript: &mut Transcript,
) -> Result<Digest> {
    let request = applet.submit_initial_measurement(report)?;
    let mut confirm: Option<Frame> = None;
    for i in 0..transport.verifier_count() {
        let peer = transport.verifier_id(i).to_owned();
        transcript.frame("->", &peer, &request);
        let response = transport.exchange(i, &request)?;
        transcript.frame("<-", &peer, &response);
        match response.msg_type {
            MsgType::ProvisionConfirm => {
                if confirm.as_ref().is_some_and(|c| c.payload != response.payload) {
                    return Err(SimError::BenchmarkMismatch);
                }
                confirm = Some(response);
            }
            _ => return Err(crate::transport::remote_error(&response)),
        }
    }
    let confirm = confirm.ok_or_else(|| SimError::ConfigInvalid("no verifiers".into()))?;
    applet.handle_frame(&confirm)?;
    transcript.lines.push(format!(
        "applet {} active benchmark {}",
        String::from_utf8_lossy(applet.device_id()),
        applet.benchmark().expect("active applet has a benchmark")
    ));
    Ok(applet.benchmark().expect("active applet has a benchmark"))
}
