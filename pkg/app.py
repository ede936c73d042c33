from flask import Flask, jsonify, request, abort
from werkzeug.security import generate_password_hash, check_password_hash
import os
import time
import logging
from datetime import datetime

from gateway import Gateway, GatewayError, DEFAULT_ARCHIVE

# 本番環境判定
is_production = os.environ.get('DORI_ENV') == 'production'

if is_production:
    logging.basicConfig(level=logging.INFO)
else:
    logging.basicConfig(level=logging.DEBUG)

logger = logging.getLogger(__name__)

HTTP_PORT = int(os.environ.get('DORI_GATEWAY_HTTP_PORT', '5002'))


def create_app(gateway: Gateway, admin_password=None):
    """gateway の運用者向け HTTP API"""
    app = Flask(__name__)
    app.config['GATEWAY'] = gateway

    # パスワードはハッシュだけ保持
    password = admin_password or os.environ.get('DORI_ADMIN_PASSWORD', 'dori')
    password_hash = generate_password_hash(password, method='pbkdf2:sha256')

    def is_authorized():
        data = request.get_json(silent=True) or {}
        given = request.headers.get('X-Admin-Password') or data.get('password')
        return bool(given) and check_password_hash(password_hash, given)

    @app.errorhandler(404)
    def not_found(error):
        return jsonify({'error': 'Not found'}), 404

    @app.errorhandler(500)
    def internal_error(error):
        logger.error(f"Internal server error: {error}")
        return jsonify({'error': 'Internal server error'}), 500

    @app.route('/api/status')
    def status():
        summary = gateway.summary()
        summary['corrupted'] = gateway.archive.verify()
        return jsonify(summary)

    @app.route('/api/archive')
    def list_archive():
        entries = [{
            'name': entry.name,
            'size': entry.size,
            'crc': f"{entry.crc:04X}",
            'received_ms': entry.received_ms,
        } for entry in gateway.archive.entries.values()]
        return jsonify({'files': entries, 'count': len(entries)})

    @app.route('/api/archive/<name>')
    def download(name):
        if name not in gateway.archive:
            abort(404)
        return app.response_class(
            response=gateway.archive.read(name),
            status=200,
            mimetype='application/octet-stream',
            headers={'Content-Disposition': f'attachment; filename={name}'}
        )

    @app.route('/api/sites')
    def sites():
        return jsonify({
            'sites': [site.to_dict() for site in gateway.sites.sites],
            'current': gateway.sites.current.site_id,
        })

    @app.route('/api/drive', methods=['POST'])
    def drive():
        """ドライブコマンドの記録（サイトを閉じて次を開く）"""
        if not is_authorized():
            return jsonify({'error': 'Unauthorized'}), 401
        data = request.get_json(silent=True) or {}
        when = data.get('time', time.time())
        if isinstance(when, bool) or not isinstance(when, (int, float)):
            return jsonify({'error': 'time must be unix seconds'}), 400
        try:
            site = gateway.register_drive_command(float(when))
        except GatewayError as e:
            logger.warning(f"drive command rejected: {e}")
            return jsonify({'error': 'Drive time precedes the current site'}), 400
        return jsonify({'site': site.to_dict()})

    @app.route('/api/magnetometer')
    def magnetometer():
        limit = request.args.get('limit', 100, type=int)
        if gateway.db is not None:
            rows = gateway.db.get_magnetometer(limit=limit)
        else:
            rows = [{
                'timestamp': row.timestamp,
                'source': row.source,
                'raw': list(row.raw),
                'corrected': None if row.corrected is None else list(row.corrected),
                'arm_angle': row.arm_angle,
                'calibrated': row.corrected is not None,
            } for row in reversed(gateway.magnetometer[-limit:])]
        return jsonify({'readings': rows, 'count': len(rows)})

    # --- Log Management API ---
    @app.route('/api/logs')
    def get_logs():
        logs = list(gateway.activity)
        return jsonify({'logs': logs, 'count': len(logs)})

    @app.route('/api/logs/clear', methods=['POST'])
    def clear_logs():
        if not is_authorized():
            return jsonify({'error': 'Unauthorized'}), 401

        log_count = len(gateway.activity)
        gateway.activity.clear()
        gateway.log_activity(f"CLEAR: {log_count} entries cleared by operator")

        return jsonify({
            'message': f'{log_count} entries cleared',
            'cleared_count': log_count
        })

    @app.route('/api/logs/export')
    def export_logs():
        log_text = '\n'.join(gateway.activity)
        timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
        return app.response_class(
            response=log_text,
            status=200,
            mimetype='text/plain',
            headers={
                'Content-Disposition': f'attachment; filename=dori_gateway_logs_{timestamp}.txt'
            }
        )

    return app


# For local development
if __name__ == '__main__':
    create_app(Gateway(DEFAULT_ARCHIVE)).run(debug=not is_production, port=HTTP_PORT)
