from __future__ import annotations

import asyncio

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ipts.media import (
    FRAME_SAMPLES,
    ConferenceRoom,
    FileMissing,
    FileSource,
    LengthMismatch,
    PortAllocator,
    RoomFull,
    RtpPacket,
    RtpSession,
    SocketClosed,
    decode_pcmu,
    detect_dtmf,
    encode_pcmu,
    event_packets,
    goertzel_power,
    is_rtp,
    mix,
    read_wav,
    tone,
    tone_energy_db,
    write_wav,
)
from ipts.media.g711 import DECODE_TABLE, ENCODE_TABLE, decode_samples, encode_samples
from ipts.media.rtp import MalformedRtp

frames = arrays(np.int16, FRAME_SAMPLES)
quiet_frames = arrays(np.int16, FRAME_SAMPLES, elements=st.integers(-8192, 8192))


# --- mu-law ------------------------------------------------------------------

def test_decode_table_matches_independent_oracle():
    assert np.array_equal(DECODE_TABLE.astype(np.int32), oracles.mulaw_decode_table())


def test_every_sample_round_trips_within_one_step():
    samples = np.arange(-32768, 32768)
    codes = ENCODE_TABLE[samples + 32768]
    decoded = oracles.mulaw_decode_table()[codes]
    steps = np.array([oracles.mulaw_step(c) for c in range(256)])[codes]
    err = np.abs(decoded - samples)
    assert np.all(err <= steps)
    # inside the coder's range the error is at most half a step
    inner = np.abs(samples) <= 32635
    assert np.all(err[inner] <= steps[inner] // 2 + 4)


@given(frames)
def test_frame_round_trip_error_bound(frame):
    back = decode_pcmu(encode_pcmu(frame)).astype(np.int32)
    codes = np.frombuffer(encode_pcmu(frame), dtype=np.uint8)
    steps = np.array([oracles.mulaw_step(int(c)) for c in codes])
    assert np.all(np.abs(back - frame.astype(np.int32)) <= steps)


def test_silence_encodes_to_a_constant_byte():
    payload = encode_pcmu(np.zeros(FRAME_SAMPLES, dtype=np.int16))
    assert payload == bytes([0xFF]) * FRAME_SAMPLES


def test_encode_is_monotone_in_magnitude():
    # larger magnitude never maps to a smaller decoded magnitude
    table = oracles.mulaw_decode_table()
    pos = np.abs(table[ENCODE_TABLE[32768:]])
    neg = np.abs(table[ENCODE_TABLE[:32769][::-1]])
    assert np.all(np.diff(pos) >= 0)
    assert np.all(np.diff(neg) >= 0)


def test_decode_encode_is_identity_on_code_words():
    for code in range(256):
        value = int(DECODE_TABLE[code])
        again = ENCODE_TABLE[value + 32768]
        assert DECODE_TABLE[again] == value


@pytest.mark.parametrize("n", [0, 159, 161, 320])
def test_length_mismatch(n):
    with pytest.raises(LengthMismatch):
        encode_pcmu(np.zeros(n, dtype=np.int16))
    with pytest.raises(LengthMismatch):
        decode_pcmu(bytes(n))


def test_unframed_helpers_accept_any_length():
    samples = np.array([0, 1000, -1000], dtype=np.int16)
    assert len(decode_samples(encode_samples(samples))) == 3


# --- mixing ---------------------------------------------------------------

@given(frames)
def test_mix_identity(frame):
    assert np.array_equal(mix([frame]), frame)


def test_mix_examples():
    half = np.full(FRAME_SAMPLES, 16383, dtype=np.int16)
    assert np.all(mix([half, half]) == 32766)
    big = np.full(FRAME_SAMPLES, 30000, dtype=np.int16)
    assert np.all(mix([big, big]) == 32767)
    assert np.all(mix([-big, -big]) == -32768)
    assert np.all(mix([]) == 0)
    with pytest.raises(LengthMismatch):
        mix([np.zeros(10, dtype=np.int16)])


@given(st.lists(quiet_frames, min_size=1, max_size=3))
def test_mix_is_exact_below_clip(fs):
    expected = np.sum([f.astype(np.int64) for f in fs], axis=0)
    assert np.array_equal(mix(fs).astype(np.int64), expected)


@given(st.lists(frames, min_size=1, max_size=4))
def test_mix_saturates(fs):
    expected = np.clip(np.sum([f.astype(np.int64) for f in fs], axis=0), -32768, 32767)
    assert np.array_equal(mix(fs), expected)


class _Stub:
    closed = False

    def __init__(self):
        self.listeners = []
        self.mode = "idle"


def test_room_mix_is_n_minus_one():
    room = ConferenceRoom("3001")
    people = [_Stub() for _ in range(3)]
    freqs = [440.0, 1000.0, 1700.0]
    room.participants.extend(people)
    frames_in = {id(p): tone(f, 0.02, 0.3) for p, f in zip(people, freqs)}
    heard = room.mix_for(frames_in)
    for p, own in zip(people, freqs):
        assert tone_energy_db(heard[id(p)], own) <= -30
        for other in set(freqs) - {own}:
            assert tone_energy_db(heard[id(p)], other) > -20


def test_lone_participant_hears_silence():
    room = ConferenceRoom("3002")
    p = _Stub()
    room.participants.append(p)
    assert not room.mix_for({id(p): tone(440, 0.02, 0.5)})[id(p)].any()


def test_room_capacity():
    async def go():
        room = ConferenceRoom("3003", capacity=2)
        room.add(_Stub())
        room.add(_Stub())
        with pytest.raises(RoomFull):
            room.add(_Stub())
        room.close()
        assert len(room) == 0

    asyncio.run(go())


# --- tone measurement -----------------------------------------------------

def test_tone_levels_against_oracle():
    x = oracles.sine(440, 8000, 0.9)
    assert tone_energy_db(x, 440) >= -3
    assert tone_energy_db(x, 1000) <= -30
    assert tone_energy_db(x, 440) == pytest.approx(oracles.dft_bin_db(x, 440), abs=0.1)


@given(st.floats(0.05, 1.0), st.sampled_from([300.0, 440.0, 1000.0, 2000.0]))
def test_goertzel_tracks_amplitude(amp, freq):
    x = tone(freq, 0.2, amp)
    assert tone_energy_db(x, freq) == pytest.approx(20 * np.log10(amp), abs=0.2)


def test_goertzel_empty_input():
    assert goertzel_power([], 440) == 0.0
    assert tone_energy_db(np.zeros(160), 440) == -200.0


def test_tone_survives_companding():
    x = tone(440, 0.5, 0.5)
    back = decode_samples(encode_samples(x))
    assert tone_energy_db(back, 440) == pytest.approx(tone_energy_db(x, 440), abs=0.1)
    assert tone_energy_db(back, 1000) <= -30


# --- RTP and DTMF ---------------------------------------------------------

@given(st.integers(0, 127), st.integers(0, 0xFFFF), st.integers(0, 2**32 - 1),
       st.integers(0, 2**32 - 1), st.binary(max_size=200), st.booleans())
def test_rtp_round_trip(pt, seq, ts, ssrc, payload, marker):
    pkt = RtpPacket(pt, seq, ts, ssrc, payload, marker)
    data = pkt.pack()
    assert len(data) == 12 + len(payload)
    assert is_rtp(data)
    assert RtpPacket.unpack(data) == pkt


def test_rtp_rejects_garbage():
    with pytest.raises(MalformedRtp):
        RtpPacket.unpack(b"\x80\x00")
    with pytest.raises(MalformedRtp):
        RtpPacket.unpack(b"\x40" + bytes(11))
    assert not is_rtp(b"INVITE sip:2002@pbx SIP/2.0\r\n")


def test_rtp_skips_csrc_and_padding():
    base = RtpPacket(0, 1, 2, 3, b"abc").pack()
    with_csrc = bytes([base[0] | 0x01]) + base[1:12] + b"\x00\x00\x00\x09" + b"abc"
    assert RtpPacket.unpack(with_csrc).payload == b"abc"
    padded = bytes([base[0] | 0x20]) + base[1:] + b"\x00\x02"
    assert RtpPacket.unpack(padded).payload == b"abc"


def test_dtmf_run_gives_one_event():
    pkts = event_packets("2", ssrc=7, seq=100, timestamp=8000)
    assert len(pkts) == 7
    assert [p.seq for p in pkts] == list(range(100, 107))
    [event] = detect_dtmf(pkts)
    assert event.digit == "2" and event.duration_ms == 100


def test_dtmf_ignores_audio_and_repeats():
    audio = RtpPacket(0, 1, 0, 7, bytes(160))
    a = event_packets("5", ssrc=7, seq=1, timestamp=0)
    b = event_packets("#", ssrc=7, seq=20, timestamp=800)
    events = detect_dtmf([audio, *a, audio, *a[-2:], *b])
    assert [e.digit for e in events] == ["5", "#"]


def test_malformed_dtmf_is_skipped():
    assert detect_dtmf([RtpPacket(101, 1, 0, 1, b"\x20\x80"),
                        RtpPacket(101, 2, 0, 1, b"\x63\x80\x00\xa0")]) == []


# --- WAV ----------------------------------------------------------------

@given(arrays(np.int16, st.integers(0, 2000)))
def test_wav_round_trip(tmp_path_factory, samples):
    path = tmp_path_factory.mktemp("wav") / "x.wav"
    write_wav(path, samples)
    assert np.array_equal(read_wav(path), samples)


def test_missing_wav(tmp_path):
    with pytest.raises(FileMissing):
        read_wav(tmp_path / "nope.wav")


def test_file_source_framing():
    src = FileSource(np.arange(400, dtype=np.int16))
    got = [src.next_frame() for _ in range(4)]
    assert got[3] is None and src.finished
    assert got[2][:80].tolist() == list(range(320, 400)) and not got[2][80:].any()
    loop = FileSource(np.arange(100, dtype=np.int16), loop=True)
    assert loop.next_frame().tolist() == list(range(100)) + list(range(60))


# --- sessions on loopback -------------------------------------------------

async def _pair():
    alloc = PortAllocator("127.0.0.1", 31000, 31999)
    a = await RtpSession.open(alloc)
    b = await RtpSession.open(alloc)
    a.remote_addr, b.remote_addr = b.local_addr, a.local_addr
    return alloc, a, b


def test_sessions_use_even_ports_and_consecutive_seq():
    async def go():
        _, a, b = await _pair()
        got = []
        b.listeners.append(lambda pkt, addr: got.append(pkt))
        start_seq = a.seq
        for _ in range(100):
            a.send_frame(tone(440, 0.02, 0.3))
        await asyncio.sleep(0.2)
        a.close()
        b.close()
        assert a.local_addr[1] % 2 == 0 and b.local_addr[1] % 2 == 0
        assert [p.seq for p in got] == [(start_seq + i) & 0xFFFF for i in range(100)]
        assert all((q.timestamp - p.timestamp) & 0xFFFFFFFF == 160 for p, q in zip(got, got[1:]))
        with pytest.raises(SocketClosed):
            a.send_frame(tone(440, 0.02, 0.3))

    asyncio.run(go())


def test_relay_keeps_payload_and_rewrites_identity():
    async def go():
        alloc, a, b = await _pair()
        c = await RtpSession.open(alloc)
        d = await RtpSession.open(alloc)
        # a -> b, b relays to c, c sends to d
        c.remote_addr = d.local_addr
        b.relay_to(c)
        sent, got = [], []
        d.listeners.append(lambda pkt, addr: got.append(pkt))
        for i in range(100):
            payload = bytes([i]) * 160
            sent.append(payload)
            a.send_payload(payload)
        await asyncio.sleep(0.3)
        for s in (a, b, c, d):
            s.close()
        assert [p.payload for p in got] == sent
        assert {p.ssrc for p in got} == {c.ssrc}
        assert [(q.seq - p.seq) & 0xFFFF for p, q in zip(got, got[1:])] == [1] * 99

    asyncio.run(go())


def test_streaming_rate_and_recording(tmp_path):
    wav = tmp_path / "one_second.wav"
    write_wav(wav, tone(440, 1.0, 0.4))

    async def go():
        _, a, b = await _pair()
        b.record(tmp_path / "rec.wav")
        a.stream_file(wav, loop=True)
        await asyncio.sleep(2.0)
        a.stop_playing()
        await asyncio.sleep(0.05)
        b.stop_recording()
        a.close()
        b.close()
        return b.received

    received = asyncio.run(go())
    assert 95 <= received <= 105
    rec = read_wav(tmp_path / "rec.wav")
    src = tone(440, 1.0, 0.4)
    head = rec[:len(src)]
    # one companding round trip away from the source
    expected = decode_samples(encode_samples(src[:len(head)]))
    assert np.array_equal(head, expected)
