// SPDX-License-Identifier: Apache-2.0

//! Simulator of a virtual TPM hosted in an SGX-style enclave.

pub mod attest;
pub mod bench;
pub mod clock;
pub mod codec;
pub mod config;
pub mod enclave;
pub mod harness;
pub mod instance;
pub mod nvram;
pub mod rollback;
pub mod tpm;
