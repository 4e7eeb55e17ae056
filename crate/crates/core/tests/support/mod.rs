// SPDX-License-Identifier: Apache-2.0

// Each test target uses a different part of this module.
#![allow(dead_code)]

pub mod commands;
pub mod reference;
