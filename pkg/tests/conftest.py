import pytest

from holo import overlay


@pytest.fixture
def hub_keys():
    return overlay.generate_keypair()


@pytest.fixture
def sensor_keys():
    return overlay.generate_keypair()


@pytest.fixture
def identities(hub_keys, sensor_keys):
    hub = overlay.PeerIdentity("hub", hub_keys[1], overlay.Role.HUB)
    sensor = overlay.PeerIdentity("A1", sensor_keys[1], overlay.Role.SENSOR)
    return hub, sensor


@pytest.fixture
def session_pair(identities, hub_keys, sensor_keys):
    """(sensor_session, hub_session) freshly established."""
    hub, sensor = identities
    half, init = overlay.handshake_initiate(sensor, sensor_keys[0], hub)
    hub_session, resp = overlay.handshake_respond(hub, hub_keys[0], {"A1": sensor}, init)
    sensor_session = overlay.handshake_finalize(half, resp)
    return sensor_session, hub_session
