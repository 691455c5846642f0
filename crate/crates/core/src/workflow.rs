//! File-level steps of the three-party workflow: the end user generates keys
//! and encrypts images, the model owner encrypts weights under the user's
//! public key, the server runs inference holding only the evaluation key.
//!
//! A key directory holds `params.json`, `public.key`, `eval.key` and, on the
//! end user's side only, `secret.key`.

use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::backend::{BackendKind, HeBackend};
use crate::ckks::CkksBackend;
use crate::error::{Error, Result};
use crate::executor::{run_inference, RunReport, ThreadPlan};
use crate::model::{argmax, encrypt_model, load_encrypted_model, save_encrypted_model, ModelDesc};
use crate::packing::{load_cipher_matrix, pack_batch_secret, save_cipher_matrix, unpack_batch, ImageBatch};
use crate::params::{derive_params, HeParams};
use crate::reference::RefBackend;

pub const PARAMS_FILE: &str = "params.json";
pub const SECRET_KEY_FILE: &str = "secret.key";
pub const PUBLIC_KEY_FILE: &str = "public.key";
pub const EVAL_KEY_FILE: &str = "eval.key";
pub const SECURITY_FLOOR_BITS: f64 = 128.0;

pub fn parse_backend(s: &str) -> Result<BackendKind> {
    match s {
        "ckks" => Ok(BackendKind::Ckks),
        "ref" | "reference" => Ok(BackendKind::Reference),
        _ => Err(Error::InvalidParams(format!("unknown backend {s:?}, expected ref or ckks"))),
    }
}

/// Refuses parameter sets below 128 bits, and the simulator (which hides
/// nothing), unless explicitly allowed.
pub fn security_gate(kind: BackendKind, params: &HeParams, allow_insecure: bool) -> Result<()> {
    if allow_insecure {
        return Ok(());
    }
    if kind == BackendKind::Reference {
        return Err(Error::Insecure(
            "the ref backend is an unencrypted simulator; pass --allow-insecure".into(),
        ));
    }
    let sec = params.security();
    if !sec.at_least(SECURITY_FLOOR_BITS) {
        return Err(Error::Insecure(format!(
            "m={}, L={} gives {sec}, below {SECURITY_FLOOR_BITS} bits; pass --allow-insecure",
            params.m, params.modulus_bits
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyInfo {
    backend: String,
    m: usize,
    #[serde(rename = "L")]
    modulus_bits: u32,
    #[serde(rename = "r")]
    precision_bits: u32,
}

/// Backend kind and parameters recorded in a key directory.
pub fn load_key_info(dir: &Path) -> Result<(BackendKind, HeParams)> {
    let text = fs::read_to_string(dir.join(PARAMS_FILE))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(PARAMS_FILE).display())))?;
    let info: KeyInfo = serde_json::from_str(&text)?;
    Ok((
        parse_backend(&info.backend)?,
        derive_params(info.m, info.modulus_bits, info.precision_bits, 0)?,
    ))
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_public<B: HeBackend>(b: &B, dir: &Path) -> Result<B::PublicKey> {
    b.read_public_key(&mut open(&dir.join(PUBLIC_KEY_FILE))?)
}

pub fn load_eval<B: HeBackend>(b: &B, dir: &Path) -> Result<B::EvalKey> {
    b.read_eval_key(&mut open(&dir.join(EVAL_KEY_FILE))?)
}

pub fn load_secret<B: HeBackend>(b: &B, dir: &Path) -> Result<B::SecretKey> {
    b.read_secret_key(&mut open(&dir.join(SECRET_KEY_FILE))?)
}

fn keygen_with<B: HeBackend>(params: HeParams, dir: &Path) -> Result<()> {
    let b = B::new(params.clone())?;
    let keys = b.keygen()?;
    fs::create_dir_all(dir)?;
    let info = KeyInfo {
        backend: B::KIND.name().into(),
        m: params.m,
        modulus_bits: params.modulus_bits,
        precision_bits: params.precision_bits,
    };
    fs::write(dir.join(PARAMS_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    write_file(&dir.join(SECRET_KEY_FILE), |w| b.write_secret_key(&keys.secret, w))?;
    write_file(&dir.join(PUBLIC_KEY_FILE), |w| b.write_public_key(&keys.public, w))?;
    write_file(&dir.join(EVAL_KEY_FILE), |w| b.write_eval_key(&keys.eval, w))?;
    Ok(())
}

/// Generates a key set into `dir`; randomness comes from `params.seed`.
pub fn keygen(kind: BackendKind, params: HeParams, dir: &Path, allow_insecure: bool) -> Result<()> {
    security_gate(kind, &params, allow_insecure)?;
    for w in params.warnings() {
        log::warn!("{w}");
    }
    match kind {
        BackendKind::Ckks => keygen_with::<CkksBackend>(params, dir),
        BackendKind::Reference => keygen_with::<RefBackend>(params, dir),
    }
}

fn encrypt_model_with<B: HeBackend>(params: HeParams, keys: &Path, model: &ModelDesc, out: &Path, seed: u64) -> Result<usize> {
    let b = B::new(params)?;
    let pk = load_public(&b, keys)?;
    let em = encrypt_model(&b, &pk, model, seed)?;
    save_encrypted_model(&b, &em, out)?;
    Ok(em.ciphertext_count())
}

/// Model owner: encrypts the weights under the user's public key. Returns
/// the number of weight ciphertexts.
pub fn encrypt_model_file(keys: &Path, model: &ModelDesc, out: &Path, seed: u64) -> Result<usize> {
    let (kind, params) = load_key_info(keys)?;
    match kind {
        BackendKind::Ckks => encrypt_model_with::<CkksBackend>(params, keys, model, out, seed),
        BackendKind::Reference => encrypt_model_with::<RefBackend>(params, keys, model, out, seed),
    }
}

fn encrypt_input_with<B: HeBackend>(params: HeParams, keys: &Path, images: &ImageBatch, out: &Path, seed: u64) -> Result<()> {
    let b = B::new(params)?;
    let sk = load_secret(&b, keys)?;
    let cm = pack_batch_secret(&b, &sk, images, seed)?;
    save_cipher_matrix(&b, &cm, out)
}

/// End user: packs up to K images, one ciphertext per pixel position, under
/// the secret key.
pub fn encrypt_input_file(keys: &Path, images: &ImageBatch, out: &Path, seed: u64) -> Result<()> {
    let (kind, params) = load_key_info(keys)?;
    match kind {
        BackendKind::Ckks => encrypt_input_with::<CkksBackend>(params, keys, images, out, seed),
        BackendKind::Reference => encrypt_input_with::<RefBackend>(params, keys, images, out, seed),
    }
}

fn infer_with<B: HeBackend>(
    params: HeParams,
    keys: &Path,
    model: &Path,
    input: &Path,
    out: &Path,
    plan: Option<ThreadPlan>,
    workers: usize,
) -> Result<RunReport> {
    let b = B::new(params)?;
    let ek = load_eval(&b, keys)?;
    let em = load_encrypted_model(&b, model)?;
    let x = load_cipher_matrix(&b, input)?;
    let plan = plan.unwrap_or_else(|| ThreadPlan::default_for(&em.topology, workers));
    let run = run_inference(&b, &ek, &em, &x, plan)?;
    save_cipher_matrix(&b, &run.logits, out)?;
    Ok(run.report)
}

/// Server: encrypted inference. Reads `params.json` and `eval.key` only.
pub fn infer_file(
    keys: &Path,
    model: &Path,
    input: &Path,
    out: &Path,
    plan: Option<ThreadPlan>,
    workers: usize,
) -> Result<RunReport> {
    let (kind, params) = load_key_info(keys)?;
    match kind {
        BackendKind::Ckks => infer_with::<CkksBackend>(params, keys, model, input, out, plan, workers),
        BackendKind::Reference => infer_with::<RefBackend>(params, keys, model, input, out, plan, workers),
    }
}

fn decrypt_with<B: HeBackend>(params: HeParams, keys: &Path, input: &Path) -> Result<Vec<Vec<f64>>> {
    let b = B::new(params)?;
    let sk = load_secret(&b, keys)?;
    let cm = load_cipher_matrix(&b, input)?;
    unpack_batch(&b, &sk, &cm)
}

/// End user: logits `[image][class]`.
pub fn decrypt_output_file(keys: &Path, input: &Path) -> Result<Vec<Vec<f64>>> {
    let (kind, params) = load_key_info(keys)?;
    match kind {
        BackendKind::Ckks => decrypt_with::<CkksBackend>(params, keys, input),
        BackendKind::Reference => decrypt_with::<RefBackend>(params, keys, input),
    }
}

/// Per-image argmax of decrypted logits; no softmax is needed for a label.
pub fn predict_file(keys: &Path, input: &Path) -> Result<Vec<usize>> {
    Ok(decrypt_output_file(keys, input)?.iter().map(|l| argmax(l)).collect())
}

/// `image,class_0,...,class_{R-1}`.
pub fn logits_csv(logits: &[Vec<f64>]) -> String {
    let classes = logits.first().map_or(0, Vec::len);
    let mut s = String::from("image");
    for c in 0..classes {
        s += &format!(",class_{c}");
    }
    s.push('\n');
    for (i, row) in logits.iter().enumerate() {
        s += &i.to_string();
        for v in row {
            s += &format!(",{v}");
        }
        s.push('\n');
    }
    s
}
