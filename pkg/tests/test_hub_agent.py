"""Hub server and agent over real sockets, in one process."""

import json
import time

import pytest

from holo import collector, controlplane as cp, overlay
from holo.agent import AgentCore, AgentProcess, OverlayLakeClient, onboard
from holo.collector import HourlyWriter, SyncPolicy, bucket_start_us, sync
from holo.hub import HubServer, admin_request
from holo.packets import PROTO_TCP, TCP_SYN, PacketRecord

ADMIN = "admin"


@pytest.fixture
def hub(tmp_path):
    controller = cp.Controller(data_dir=tmp_path / "controller", heartbeat_interval=0.5)
    server = HubServer(controller)
    controller.hub_address = server.address
    server.start()
    yield server
    server.stop()
    controller.close()


def join(hub, tmp_path, sensor_id="A1", honeypot=True):
    reply = admin_request(
        hub.address,
        {"op": "token_new", "principal": ADMIN, "sensor_id": sensor_id, "ttl": 600},
    )
    desc = cp.SensorDescriptor(sensor_id, "org-a", "ITA", ["10.9.1.0/24"],
                               honeypot_allowed=honeypot, workload_allowed=True)
    identity = onboard(hub.address, reply["token"], desc)
    core = AgentCore(sensor_id, data_dir=tmp_path / f"agent-{sensor_id}", descriptor=desc)
    proc = AgentProcess(identity, core, hub_address=hub.address)
    proc.connect()
    return proc, core


def test_heartbeat_applies_actions_over_sockets(hub, tmp_path):
    proc, core = join(hub, tmp_path)
    try:
        spec = cp.ModuleSpec("darknet", "dk", {"ranges": ["10.9.1.0/25"]}, target_ids=["A1"])
        admin_request(hub.address, {"op": "deploy", "principal": ADMIN, "spec": spec.to_doc()})
        proc.heartbeat_once()  # receives the start action
        assert "dk-0" in core.instances
        proc.heartbeat_once()  # reports running; converged
        status = hub.controller.status()
        instances = status["sensors"][0]["instances"]
        assert [i["status"] for i in instances] == ["running"]
    finally:
        proc.stop()


def test_keepalive_refreshes_session(hub, tmp_path):
    proc, _ = join(hub, tmp_path)
    try:
        proc.heartbeat_once()
        session = hub.sessions["A1"]
        before = session.last_recv_at
        time.sleep(0.05)
        proc.send_keepalive()
        proc.heartbeat_once()  # forces the server loop past the keepalive
        assert hub.sessions["A1"].last_recv_at >= before
    finally:
        proc.stop()


def test_session_expiry_arithmetic(session_pair):
    sensor_session, _ = session_pair
    sensor_session.last_recv_at = 100.0
    assert not sensor_session.expired(100.0 + 74.9)
    assert sensor_session.expired(100.0 + 75.1)  # 3 keepalives of 25s missed


def test_log_channel_lands_in_hub_logs(hub, tmp_path):
    proc, _ = join(hub, tmp_path)
    try:
        proc.send_log({"level": "info", "msg": "responder started"})
        log_path = hub.controller.data_dir / "logs" / "A1.jsonl"
        assert json.loads(log_path.read_text())["msg"] == "responder started"
    finally:
        proc.stop()


def test_trace_sync_over_overlay_channel(hub, tmp_path):
    proc, _ = join(hub, tmp_path)
    try:
        local = tmp_path / "traces"
        writer = HourlyWriter(local, "A1")
        base = bucket_start_us("2025-08-01-00")
        for h in range(2):
            for p in range(5):
                writer.append(PacketRecord(
                    ts=base + h * 3_600_000_000 + p, src_ip="1.1.1.1", dst_ip="10.9.1.5",
                    proto=PROTO_TCP, src_port=1, dst_port=22, tcp_flags=TCP_SYN,
                ))
        sealed = writer.seal()
        lake_client = OverlayLakeClient(proc)
        report = sync(SyncPolicy(retention_hours=99999), local, lake_client, now=0.0)
        assert report.uploaded == 2
        # the hub's lake now holds hash-verified copies
        for meta in writer.sealed:
            assert hub.lake.verified_hash("A1", meta.hour_bucket) == meta.content_hash
        again = sync(SyncPolicy(retention_hours=99999), local, lake_client, now=0.0)
        assert again.uploaded == 0 and again.skipped == 2
    finally:
        proc.stop()


def test_trace_channel_rejects_foreign_sensor_id(hub, tmp_path):
    proc, _ = join(hub, tmp_path)
    try:
        lake_client = OverlayLakeClient(proc)
        with pytest.raises(collector.LakeUnreachable):
            lake_client._call({"op": "chunk", "sensor": "B9", "bucket": "2025-08-01-00",
                               "offset": 0}, b"data")
    finally:
        proc.stop()


def test_hub_logs_policy_violation_event(hub, tmp_path):
    proc, _ = join(hub, tmp_path)
    try:
        proc.heartbeat_once()
        # hand-craft a sensor-to-sensor frame on the live connection
        with proc._io_lock:
            frame = proc.session.seal(b"\x00attack")
            forged = overlay.Frame(frame.msg_type, "A1", "B7", frame.ciphertext)
            proc._sock.sendall(overlay.encode_frame(forged))
        proc.heartbeat_once()  # forces the server loop to process the frame
        kinds = [e["event"] for e in hub.events]
        assert "frame-rejected" in kinds
        rejected = [e for e in hub.events if e["event"] == "frame-rejected"][0]
        assert rejected["dst"] == "B7"
    finally:
        proc.stop()


def test_handshake_with_unknown_sensor_rejected(hub):
    priv, pub = overlay.generate_keypair()
    ghost = overlay.PeerIdentity("ghost", pub, overlay.Role.SENSOR)
    hub_peer = overlay.PeerIdentity(
        hub.controller.hub_id, hub.controller.hub_public, overlay.Role.HUB
    )
    _, init = overlay.handshake_initiate(ghost, priv, hub_peer)
    import socket as socket_mod

    host, _, port = hub.address.rpartition(":")
    with socket_mod.create_connection((host, int(port)), timeout=5) as sock:
        sock.sendall(overlay.encode_frame(init))
        data = sock.recv(1024)
    assert data == b""  # connection closed without a handshake response
    assert any(e["event"] == "handshake-rejected" for e in hub.events)


def test_admin_unknown_op_and_bad_principal(hub):
    reply = admin_request(hub.address, {"op": "frobnicate"})
    assert reply["error"] == "UnknownOp"
    reply = admin_request(hub.address, {"op": "status", "principal": "nobody"})
    assert reply["error"] == "Unauthorized"


def test_merged_program_carves_responder_space_out_of_darknet():
    """A responder inside a darknet /24 must not fall under the drop rules."""
    from holo import toolbox
    from holo.agent import build_sensor_program
    from holo.packets import TCP_ACK

    specs = [
        cp.ModuleSpec("darknet", "dk", {"ranges": ["10.9.1.0/24"]}, target_ids=["A1"]),
        cp.ModuleSpec("responder", "hp", {"ip_ranges": ["10.9.1.240/28"], "ports": ["1-1023"]},
                      target_ids=["A1"]),
    ]
    program, limiters = build_sensor_program(specs)
    synack = PacketRecord(ts=0, src_ip="10.9.1.241", dst_ip="203.0.113.5", proto=PROTO_TCP,
                          src_port=80, dst_port=41000, tcp_flags=TCP_SYN | TCP_ACK)
    action = toolbox.evaluate(program, synack, toolbox.OUT)
    assert action.kind == toolbox.ACT_RATELIMIT  # not dropped
    dark = PacketRecord(ts=0, src_ip="10.9.1.7", dst_ip="203.0.113.5", proto=PROTO_TCP,
                        src_port=22, dst_port=41000, tcp_flags=TCP_SYN | TCP_ACK)
    assert toolbox.evaluate(program, dark, toolbox.OUT).kind == toolbox.ACT_DROP
    assert limiters["egress"] == (100.0, 100.0)


def test_agent_identity_restart_reconnects(hub, tmp_path):
    proc, _ = join(hub, tmp_path, sensor_id="R1")
    ident_path = tmp_path / "ident.json"
    proc.identity.save(ident_path)
    proc.stop()

    from holo.agent import AgentIdentity

    identity = AgentIdentity.load(ident_path)
    core = AgentCore("R1")
    proc2 = AgentProcess(identity, core, hub_address=hub.address)
    proc2.connect()
    try:
        assert proc2.heartbeat_once()["ack"] is True
    finally:
        proc2.stop()
