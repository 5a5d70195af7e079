// SPDX-License-Identifier: Apache-2.0

//! CapsuleFS: a filesystem layered over signed, encrypted, append-only
//! DataCapsules.
//!
//! Layers, bottom up: [`codec`] and [`crypto`] primitives, the block model
//! in [`block`] and [`merkle`], the capsule [`server`], the write
//! [`middleware`], and the [`client`] with its [`journal`] and
//! [`block_cache`]. [`net`] carries all of it over TCP.

pub mod block;
pub mod block_cache;
pub mod client;
pub mod codec;
pub mod config;
pub mod crypto;
pub mod fetch;
pub mod harness;
pub mod journal;
pub mod merkle;
pub mod middleware;
pub mod net;
pub mod server;
pub mod service;
pub mod view;
pub mod writer;
