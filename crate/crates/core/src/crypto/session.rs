//! X3DH session establishment and the double ratchet that follows it.
//!
//! Key schedule (initiator side, responder mirrors it):
//!
//! ```text
//! dh1 = DH(ik_A, prepk_B)   dh2 = DH(ek_A, ipk_B)   dh3 = DH(ek_A, prepk_B)
//! dh4 = DH(ek_A, eprepk_B)                      -- only with a one-time prekey
//! rk_0            = KDF_r(dh1 || dh2 || dh3 [|| dh4])
//! rk_1, ck_{0,0}  = KDF_r(rk_0, DH(rchk_0, prepk_B))
//! ck_{0,y+1}, mk_{0,y} = KDF_m(ck_{0,y})
//! ```
//!
//! The responder's signed prekey doubles as its ratchet key for `x = 0`, so
//! every initiator message sent before the first reply is recoverable from
//! `ik_B` and `prek_B` alone when no one-time prekey was used.

use std::collections::HashMap;

use rand::{CryptoRng, RngCore};

use super::aead::{self, Sealed};
use super::envelope::{associated_data, Envelope, MessageHeader, PrekeyHeader};
use super::kdf::{kdf_message, kdf_root_initial, kdf_root_step, ChainKey, Direction, MessageKey, RootKey};
use super::keys::{
    verify_prekey, EphemeralKeyPair, IdentityKeyPair, KeyId, OneTimePrekeyPair, PublicKey,
    RatchetKeyPair, SignedPrekeyPair, SignedPrekeyPublic,
};
use super::CryptoError;

/// Upper bound on message keys derived ahead for out-of-order delivery.
pub const MAX_SKIP: u32 = 2000;

/// The public material of a fetched prekey bundle that the handshake needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BundleKeys {
    pub identity: PublicKey,
    pub signed_prekey: SignedPrekeyPublic,
    pub one_time_prekey: Option<(KeyId, PublicKey)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionRole {
    Initiator,
    Responder,
}

impl SessionRole {
    fn sending_direction(self) -> Direction {
        match self {
            SessionRole::Initiator => Direction::InitiatorToResponder,
            SessionRole::Responder => Direction::ResponderToInitiator,
        }
    }
}

/// Handshake transcript, exposed so both sides can be compared bit for bit.
#[derive(Clone, Debug)]
pub struct HandshakeKeys {
    pub dh_invocations: usize,
    pub root_key_0: RootKey,
    pub root_key_1: RootKey,
    pub chain_key_0: ChainKey,
    pub message_key_0: MessageKey,
}

#[derive(Clone, Debug)]
pub struct SessionState {
    role: SessionRole,
    local_identity: PublicKey,
    remote_identity: PublicKey,
    base_key: PublicKey,
    root_key: RootKey,
    sending: Option<ChainKey>,
    receiving: Option<ChainKey>,
    local_ratchet: Option<RatchetKeyPair>,
    remote_ratchet: PublicKey,
    ratchet_index: u32,
    previous_counter: u32,
    pending_prekey: Option<PrekeyHeader>,
    used_signed_prekey_id: KeyId,
    used_one_time_prekey_id: Option<KeyId>,
    fs_restored: bool,
    skipped: HashMap<(PublicKey, u32), MessageKey>,
}

fn derive_first_chain(
    dh_outputs: &[[u8; 32]],
    ratchet_dh: &[u8; 32],
) -> (RootKey, RootKey, ChainKey) {
    let mut concat = Vec::with_capacity(dh_outputs.len() * 32);
    for dh in dh_outputs {
        concat.extend_from_slice(dh);
    }
    let rk0 = kdf_root_initial(&concat);
    let (rk1, ck) = kdf_root_step(&rk0, ratchet_dh, 0, Direction::InitiatorToResponder);
    (rk0, rk1, ck)
}

/// Runs the initiator half of X3DH against a fetched bundle.
pub fn x3dh_initiate<R: RngCore + CryptoRng>(
    identity: &IdentityKeyPair,
    bundle: &BundleKeys,
    rng: &mut R,
) -> Result<(SessionState, HandshakeKeys), CryptoError> {
    let spk = &bundle.signed_prekey;
    if !verify_prekey(&bundle.identity, &spk.public, &spk.signature) {
        return Err(CryptoError::HandshakeRejected);
    }

    let ephemeral = EphemeralKeyPair::generate(rng);
    let ratchet = RatchetKeyPair::generate(rng);

    let mut dh = vec![
        identity.pair().dh(&spk.public)?,
        ephemeral.pair().dh(&bundle.identity)?,
        ephemeral.pair().dh(&spk.public)?,
    ];
    if let Some((_, otpk)) = &bundle.one_time_prekey {
        dh.push(ephemeral.pair().dh(otpk)?);
    }
    let ratchet_dh = ratchet.pair().dh(&spk.public)?;
    let (rk0, rk1, ck) = derive_first_chain(&dh, &ratchet_dh);
    let (_, mk) = kdf_message(&ck);

    let prekey = PrekeyHeader {
        initiator_identity: identity.public(),
        base_key: ephemeral.public(),
        signed_prekey_id: spk.id,
        one_time_prekey_id: bundle.one_time_prekey.map(|(id, _)| id),
    };
    let keys = HandshakeKeys {
        dh_invocations: dh.len(),
        root_key_0: rk0,
        root_key_1: rk1.clone(),
        chain_key_0: ck.clone(),
        message_key_0: mk,
    };
    let state = SessionState {
        role: SessionRole::Initiator,
        local_identity: identity.public(),
        remote_identity: bundle.identity,
        base_key: ephemeral.public(),
        root_key: rk1,
        sending: Some(ck),
        receiving: None,
        local_ratchet: Some(ratchet),
        remote_ratchet: spk.public,
        ratchet_index: 0,
        previous_counter: 0,
        pending_prekey: Some(prekey),
        used_signed_prekey_id: spk.id,
        used_one_time_prekey_id: prekey.one_time_prekey_id,
        fs_restored: false,
        skipped: HashMap::new(),
    };
    Ok((state, keys))
}

/// Runs the responder half of X3DH on an initial envelope and decrypts it.
///
/// The caller resolves the signed and one-time prekeys named in the envelope;
/// a mismatch between what the envelope names and what is supplied is an
/// error, and nothing is returned unless the first message authenticates.
pub fn x3dh_respond<R: RngCore + CryptoRng>(
    identity: &IdentityKeyPair,
    signed_prekey: &SignedPrekeyPair,
    one_time_prekey: Option<&OneTimePrekeyPair>,
    envelope: &Envelope,
    rng: &mut R,
) -> Result<(SessionState, Vec<u8>, HandshakeKeys), CryptoError> {
    let header = envelope.prekey.ok_or(CryptoError::NotInitialEnvelope)?;
    if header.signed_prekey_id != signed_prekey.id() || signed_prekey.is_erased() {
        return Err(CryptoError::StaleBundle(header.signed_prekey_id));
    }
    let otpk = match (header.one_time_prekey_id, one_time_prekey) {
        (Some(id), Some(k)) if k.id() == id => Some(k),
        (Some(id), _) => return Err(CryptoError::UnknownOneTimePrekey(id)),
        (None, _) => None,
    };

    let initiator = header.initiator_identity;
    let base = header.base_key;
    let mut dh = vec![
        signed_prekey.pair().dh(&initiator)?,
        identity.pair().dh(&base)?,
        signed_prekey.pair().dh(&base)?,
    ];
    if let Some(k) = otpk {
        dh.push(k.pair().dh(&base)?);
    }
    let ratchet_dh = signed_prekey.pair().dh(&envelope.header.ratchet_key)?;
    let (rk0, rk1, ck) = derive_first_chain(&dh, &ratchet_dh);
    let (_, mk) = kdf_message(&ck);

    let keys = HandshakeKeys {
        dh_invocations: dh.len(),
        root_key_0: rk0,
        root_key_1: rk1.clone(),
        chain_key_0: ck.clone(),
        message_key_0: mk,
    };
    let mut state = SessionState {
        role: SessionRole::Responder,
        local_identity: identity.public(),
        remote_identity: initiator,
        base_key: base,
        root_key: rk1,
        sending: None,
        receiving: Some(ck),
        local_ratchet: None,
        remote_ratchet: envelope.header.ratchet_key,
        ratchet_index: 0,
        previous_counter: 0,
        pending_prekey: None,
        used_signed_prekey_id: signed_prekey.id(),
        used_one_time_prekey_id: otpk.map(|k| k.id()),
        fs_restored: false,
        skipped: HashMap::new(),
    };
    let plaintext = state.decrypt(envelope, rng)?;
    Ok((state, plaintext, keys))
}

impl SessionState {
    pub fn role(&self) -> SessionRole {
        self.role
    }

    pub fn local_identity(&self) -> PublicKey {
        self.local_identity
    }

    pub fn remote_identity(&self) -> PublicKey {
        self.remote_identity
    }

    /// The initiator's handshake public key `epk^A`; identifies the session.
    pub fn base_key(&self) -> PublicKey {
        self.base_key
    }

    pub fn root_key(&self) -> &RootKey {
        &self.root_key
    }

    pub fn sending_chain(&self) -> Option<&ChainKey> {
        self.sending.as_ref()
    }

    pub fn receiving_chain(&self) -> Option<&ChainKey> {
        self.receiving.as_ref()
    }

    pub fn ratchet_index(&self) -> u32 {
        self.ratchet_index
    }

    pub fn remote_ratchet(&self) -> PublicKey {
        self.remote_ratchet
    }

    pub fn local_ratchet_public(&self) -> Option<PublicKey> {
        self.local_ratchet.as_ref().map(|r| r.public())
    }

    pub fn used_signed_prekey_id(&self) -> KeyId {
        self.used_signed_prekey_id
    }

    pub fn used_one_time_prekey_id(&self) -> Option<KeyId> {
        self.used_one_time_prekey_id
    }

    pub fn fs_restored(&self) -> bool {
        self.fs_restored
    }

    /// Whether the initiator is still attaching the prekey header (no reply yet).
    pub fn awaiting_reply(&self) -> bool {
        self.pending_prekey.is_some()
    }

    /// Advances the sending chain: `ck_{x,y+1}, mk_{x,y} <- KDF_m(ck_{x,y})`.
    pub fn symmetric_ratchet_send(&mut self) -> Result<MessageKey, CryptoError> {
        let chain = self.sending.as_ref().ok_or(CryptoError::NoSendingChain)?;
        let (next, mk) = kdf_message(chain);
        self.sending = Some(next);
        Ok(mk)
    }

    /// Sending-side asymmetric ratchet step with a fresh local ratchet pair.
    ///
    /// The superseded local ratchet secret is erased; from then on the
    /// session's new keys no longer depend on anything an attacker holding
    /// only long- and medium-term secrets can compute.
    pub fn asymmetric_ratchet_respond<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
    ) -> Result<(), CryptoError> {
        let fresh = RatchetKeyPair::generate(rng);
        let dh = fresh.pair().dh(&self.remote_ratchet)?;
        let x = self.ratchet_index + 1;
        let (rk, ck) = kdf_root_step(&self.root_key, &dh, x, self.role.sending_direction());
        self.previous_counter = self.sending.as_ref().map_or(0, |c| c.message_index());
        self.root_key = rk;
        self.sending = Some(ck);
        self.ratchet_index = x;
        if let Some(mut old) = self.local_ratchet.replace(fresh) {
            old.erase();
        }
        self.fs_restored = true;
        Ok(())
    }

    fn receiving_ratchet_step(&mut self, remote: PublicKey, x: u32) -> Result<(), CryptoError> {
        let local = self
            .local_ratchet
            .as_ref()
            .ok_or(CryptoError::UnexpectedRatchetKey)?;
        let dh = local.pair().dh(&remote)?;
        let (rk, ck) = kdf_root_step(&self.root_key, &dh, x, self.role.sending_direction().reverse());
        self.root_key = rk;
        self.receiving = Some(ck);
        self.remote_ratchet = remote;
        self.ratchet_index = x;
        self.pending_prekey = None;
        Ok(())
    }

    fn skip_until(&mut self, until: u32) -> Result<(), CryptoError> {
        let Some(chain) = self.receiving.as_ref() else {
            return Ok(());
        };
        if until > chain.message_index() + MAX_SKIP {
            return Err(CryptoError::TooManySkipped(until - chain.message_index()));
        }
        let mut chain = chain.clone();
        while chain.message_index() < until {
            let (next, mk) = kdf_message(&chain);
            self.skipped.insert((self.remote_ratchet, mk.message_index()), mk);
            chain = next;
        }
        self.receiving = Some(chain);
        Ok(())
    }

    pub fn encrypt<R: RngCore + CryptoRng>(
        &mut self,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<Envelope, CryptoError> {
        if self.sending.is_none() {
            self.asymmetric_ratchet_respond(rng)?;
        }
        let mk = self.symmetric_ratchet_send()?;
        let ratchet_key = self
            .local_ratchet
            .as_ref()
            .map(|r| r.public())
            .ok_or(CryptoError::NoSendingChain)?;
        let header = MessageHeader {
            ratchet_key,
            ratchet_index: mk.ratchet_index(),
            counter: mk.message_index(),
            previous_counter: self.previous_counter,
        };
        let ad = associated_data(
            &header,
            self.pending_prekey.as_ref(),
            &self.local_identity,
            &self.remote_identity,
        );
        let mut iv = [0u8; aead::IV_LEN];
        rng.fill_bytes(&mut iv);
        let sealed: Sealed = aead::seal(&mk, iv, plaintext, &ad);
        Ok(Envelope {
            prekey: self.pending_prekey,
            header,
            sealed,
        })
    }

    /// Decrypts an envelope; on any failure the session is left untouched.
    pub fn decrypt<R: RngCore + CryptoRng>(
        &mut self,
        envelope: &Envelope,
        rng: &mut R,
    ) -> Result<Vec<u8>, CryptoError> {
        let header = &envelope.header;
        let ad = associated_data(
            header,
            envelope.prekey.as_ref(),
            &self.remote_identity,
            &self.local_identity,
        );

        if let Some(mk) = self.skipped.get(&(header.ratchet_key, header.counter)) {
            let pt = aead::open(mk, &envelope.sealed, &ad)?;
            self.skipped.remove(&(header.ratchet_key, header.counter));
            return Ok(pt);
        }

        let mut next = self.clone();
        let new_ratchet = header.ratchet_key != next.remote_ratchet;
        if new_ratchet {
            next.skip_until(header.previous_counter)?;
            next.receiving_ratchet_step(header.ratchet_key, header.ratchet_index)?;
        }
        let receiving_index = next
            .receiving
            .as_ref()
            .map(|c| c.message_index())
            .ok_or(CryptoError::AuthenticationFailed)?;
        if header.counter < receiving_index {
            return Err(CryptoError::DuplicateMessage);
        }
        next.skip_until(header.counter)?;
        let chain = next.receiving.as_ref().expect("receiving chain checked above");
        let (chain_next, mk) = kdf_message(chain);
        let pt = aead::open(&mk, &envelope.sealed, &ad)?;
        next.receiving = Some(chain_next);
        if new_ratchet {
            next.asymmetric_ratchet_respond(rng)?;
        }
        *self = next;
        Ok(pt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Bob {
        identity: IdentityKeyPair,
        signed: SignedPrekeyPair,
        one_time: OneTimePrekeyPair,
    }

    fn bob(rng: &mut ChaCha20Rng) -> Bob {
        let identity = IdentityKeyPair::generate(rng);
        let signed = SignedPrekeyPair::generate(KeyId(1), &identity, rng).unwrap();
        let one_time = OneTimePrekeyPair::generate(KeyId(26), rng);
        Bob {
            identity,
            signed,
            one_time,
        }
    }

    fn bundle(b: &Bob, with_otpk: bool) -> BundleKeys {
        BundleKeys {
            identity: b.identity.public(),
            signed_prekey: b.signed.to_public(),
            one_time_prekey: with_otpk.then(|| (b.one_time.id(), b.one_time.public())),
        }
    }

    #[test]
    fn four_dh_with_one_time_prekey_three_without() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let alice = IdentityKeyPair::generate(&mut rng);
        let b = bob(&mut rng);
        let (s, k) = x3dh_initiate(&alice, &bundle(&b, true), &mut rng).unwrap();
        assert_eq!(k.dh_invocations, 4);
        assert_eq!(s.used_one_time_prekey_id(), Some(KeyId(26)));
        let (s, k) = x3dh_initiate(&alice, &bundle(&b, false), &mut rng).unwrap();
        assert_eq!(k.dh_invocations, 3);
        assert_eq!(s.used_one_time_prekey_id(), None);
    }

    #[test]
    fn rejects_bundle_signed_by_other_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let alice = IdentityKeyPair::generate(&mut rng);
        let b = bob(&mut rng);
        let mallory = IdentityKeyPair::generate(&mut rng);
        let resigned =
            SignedPrekeyPair::from_pair(b.signed.pair().clone(), KeyId(1), &mallory, &mut rng).unwrap();
        let mut bad = bundle(&b, true);
        bad.signed_prekey = resigned.to_public();
        assert_eq!(
            x3dh_initiate(&alice, &bad, &mut rng).unwrap_err(),
            CryptoError::HandshakeRejected
        );
    }

    #[test]
    fn both_variants_agree_and_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for with_otpk in [true, false] {
            let alice = IdentityKeyPair::generate(&mut rng);
            let b = bob(&mut rng);
            let (mut a, ka) = x3dh_initiate(&alice, &bundle(&b, with_otpk), &mut rng).unwrap();
            let env = a.encrypt(b"hi bob", &mut rng).unwrap();
            let otpk = with_otpk.then_some(&b.one_time);
            let (s, pt, kb) = x3dh_respond(&b.identity, &b.signed, otpk, &env, &mut rng).unwrap();
            assert_eq!(pt, b"hi bob");
            assert_eq!(ka.root_key_0, kb.root_key_0);
            assert_eq!(ka.root_key_1, kb.root_key_1);
            assert_eq!(ka.chain_key_0, kb.chain_key_0);
            assert_eq!(ka.message_key_0, kb.message_key_0);
            assert_eq!(s.used_one_time_prekey_id(), a.used_one_time_prekey_id());
        }
    }

    #[test]
    fn tampered_associated_data_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let alice = IdentityKeyPair::generate(&mut rng);
        let b = bob(&mut rng);
        let (mut a, _) = x3dh_initiate(&alice, &bundle(&b, false), &mut rng).unwrap();
        let mut env = a.encrypt(b"x", &mut rng).unwrap();
        env.header.counter = 0;
        env.header.previous_counter = 7;
        assert_eq!(
            x3dh_respond(&b.identity, &b.signed, None, &env, &mut rng).unwrap_err(),
            CryptoError::AuthenticationFailed
        );
    }

    #[test]
    fn responder_checks_named_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let alice = IdentityKeyPair::generate(&mut rng);
        let b = bob(&mut rng);
        let (mut a, _) = x3dh_initiate(&alice, &bundle(&b, true), &mut rng).unwrap();
        let env = a.encrypt(b"x", &mut rng).unwrap();
        assert_eq!(
            x3dh_respond(&b.identity, &b.signed, None, &env, &mut rng).unwrap_err(),
            CryptoError::UnknownOneTimePrekey(KeyId(26))
        );
        let newer = SignedPrekeyPair::generate(KeyId(2), &b.identity, &mut rng).unwrap();
        assert_eq!(
            x3dh_respond(&b.identity, &newer, Some(&b.one_time), &env, &mut rng).unwrap_err(),
            CryptoError::StaleBundle(KeyId(1))
        );
    }

    #[test]
    fn ratchet_index_advances_once_per_direction_switch() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let alice = IdentityKeyPair::generate(&mut rng);
        let b = bob(&mut rng);
        let (mut a, _) = x3dh_initiate(&alice, &bundle(&b, false), &mut rng).unwrap();
        let e0 = a.encrypt(b"a0", &mut rng).unwrap();
        let e1 = a.encrypt(b"a1", &mut rng).unwrap();
        assert_eq!((e0.header.ratchet_index, e0.header.counter), (0, 0));
        assert_eq!((e1.header.ratchet_index, e1.header.counter), (0, 1));
        let (mut bs, _, _) = x3dh_respond(&b.identity, &b.signed, None, &e0, &mut rng).unwrap();
        assert_eq!(bs.decrypt(&e1, &mut rng).unwrap(), b"a1");
        assert!(!bs.fs_restored());

        let r = bs.encrypt(b"b", &mut rng).unwrap();
        assert_eq!(r.header.ratchet_index, 1);
        assert!(r.prekey.is_none());
        assert!(bs.fs_restored());

        assert_eq!(a.decrypt(&r, &mut rng).unwrap(), b"b");
        assert!(a.fs_restored());
        assert!(!a.awaiting_reply());
        let e2 = a.encrypt(b"a2", &mut rng).unwrap();
        assert_eq!(e2.header.ratchet_index, 2);
        assert!(e2.prekey.is_none());
        assert_eq!(bs.decrypt(&e2, &mut rng).unwrap(), b"a2");
        let r2 = bs.encrypt(b"b2", &mut rng).unwrap();
        assert_eq!(r2.header.ratchet_index, 3);
    }

    #[test]
    fn out_of_order_within_chain() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let alice = IdentityKeyPair::generate(&mut rng);
        let b = bob(&mut rng);
        let (mut a, _) = x3dh_initiate(&alice, &bundle(&b, true), &mut rng).unwrap();
        let envs: Vec<_> = (0..4)
            .map(|i| a.encrypt(format!("m{i}").as_bytes(), &mut rng).unwrap())
            .collect();
        let (mut bs, _, _) =
            x3dh_respond(&b.identity, &b.signed, Some(&b.one_time), &envs[0], &mut rng).unwrap();
        assert_eq!(bs.decrypt(&envs[3], &mut rng).unwrap(), b"m3");
        assert_eq!(bs.decrypt(&envs[1], &mut rng).unwrap(), b"m1");
        assert_eq!(bs.decrypt(&envs[2], &mut rng).unwrap(), b"m2");
        assert_eq!(
            bs.decrypt(&envs[2], &mut rng).unwrap_err(),
            CryptoError::DuplicateMessage
        );
    }

    #[test]
    fn failed_decrypt_leaves_state_untouched() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let alice = IdentityKeyPair::generate(&mut rng);
        let b = bob(&mut rng);
        let (mut a, _) = x3dh_initiate(&alice, &bundle(&b, false), &mut rng).unwrap();
        let e0 = a.encrypt(b"a0", &mut rng).unwrap();
        let mut e1 = a.encrypt(b"a1", &mut rng).unwrap();
        let (mut bs, _, _) = x3dh_respond(&b.identity, &b.signed, None, &e0, &mut rng).unwrap();
        e1.sealed.tag[0] ^= 1;
        let before = bs.receiving_chain().cloned();
        assert!(bs.decrypt(&e1, &mut rng).is_err());
        assert_eq!(bs.receiving_chain().cloned(), before);
    }
}
