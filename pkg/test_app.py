#!/usr/bin/env python3
import pytest

from app import create_app
from gateway import Gateway
from messages import reading_frame
from nodes import LogRecord
from sensors import SensorKind
from uplink import encode_upload

AUTH = {'X-Admin-Password': 'secret'}


@pytest.fixture
def gateway(tmp_path):
    return Gateway(tmp_path / "archive")


@pytest.fixture
def client(gateway):
    app = create_app(gateway, admin_password='secret')
    app.config['TESTING'] = True
    return app.test_client()


def store_log(gateway):
    frame = reading_frame(SensorKind.MAG, (10.0, 20.0, 30.0), 3)
    data = LogRecord(1_000_000, 3, frame.id, frame.payload).encode()
    gateway.receive_upload(encode_upload("LOG0001.BIN", data), 1_000)
    return data


def test_status(client, gateway):
    store_log(gateway)
    response = client.get('/api/status')
    assert response.status_code == 200
    body = response.get_json()
    assert body['acked'] == 1 and body['archived'] == 1
    assert body['corrupted'] == []
    assert body['current_site'] == 1


def test_archive_listing_and_download(client, gateway):
    data = store_log(gateway)
    listing = client.get('/api/archive').get_json()
    assert listing['count'] == 1
    assert listing['files'][0]['name'] == "LOG0001.BIN"
    response = client.get('/api/archive/LOG0001.BIN')
    assert response.status_code == 200
    assert response.data == data
    missing = client.get('/api/archive/LOG0099.BIN')
    assert missing.status_code == 404
    assert missing.get_json() == {'error': 'Not found'}


def test_magnetometer_rows(client, gateway):
    store_log(gateway)
    body = client.get('/api/magnetometer?limit=5').get_json()
    assert body['count'] == 1
    row = body['readings'][0]
    assert row['raw'] == [10.0, 20.0, 30.0]
    assert row['calibrated'] is False


def test_drive_requires_password(client):
    assert client.post('/api/drive', json={'time': 100.0}).status_code == 401
    assert client.post('/api/drive', json={'time': 100.0, 'password': 'wrong'}).status_code == 401
    response = client.post('/api/drive', json={'time': 100.0}, headers=AUTH)
    assert response.status_code == 200
    assert response.get_json()['site']['site_id'] == 2
    sites = client.get('/api/sites').get_json()
    assert sites['current'] == 2
    assert sites['sites'][0]['end_time'] == 100.0


def test_drive_rejects_bad_times(client):
    client.post('/api/drive', json={'time': 100.0}, headers=AUTH)
    assert client.post('/api/drive', json={'time': 50.0}, headers=AUTH).status_code == 400
    assert client.post('/api/drive', json={'time': 'soon'}, headers=AUTH).status_code == 400


def test_activity_log_endpoints(client, gateway):
    store_log(gateway)
    logs = client.get('/api/logs').get_json()
    assert logs['count'] == 1 and 'ack: LOG0001.BIN' in logs['logs'][0]

    export = client.get('/api/logs/export')
    assert export.mimetype == 'text/plain'
    assert b'LOG0001.BIN' in export.data

    assert client.post('/api/logs/clear').status_code == 401
    cleared = client.post('/api/logs/clear', json={'password': 'secret'}).get_json()
    assert cleared['cleared_count'] == 1
    # 消去そのものは記録に残る
    assert len(gateway.activity) == 1
