import sqlite3
import json
from datetime import datetime


class GatewayDB:
    """gateway のサイト・位置・磁力計の記録（SQLite）"""

    def __init__(self, db_name='dori_gateway.db'):
        self.db_name = db_name
        self.init_database()

    def init_database(self):
        """データベースとテーブルを初期化"""
        conn = sqlite3.connect(self.db_name)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS sites (
                site_id INTEGER PRIMARY KEY,
                start_time REAL NOT NULL,
                end_time REAL,
                latitude REAL,
                longitude REAL
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS fixes (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                timestamp REAL NOT NULL,
                latitude REAL NOT NULL,
                longitude REAL NOT NULL,
                site_id INTEGER NOT NULL,
                source INTEGER DEFAULT 0
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS magnetometer (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                timestamp REAL NOT NULL,
                source INTEGER NOT NULL,
                raw_x REAL, raw_y REAL, raw_z REAL,
                corrected_x REAL, corrected_y REAL, corrected_z REAL,
                arm_angle REAL,
                calibrated INTEGER DEFAULT 0
            )
        ''')

        # インデックスを作成
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_fix_time ON fixes(timestamp)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_mag_time ON magnetometer(timestamp)')

        conn.commit()
        conn.close()

    def save_site(self, site_id, start_time, end_time=None, latitude=None, longitude=None):
        """サイトを追加または更新"""
        conn = sqlite3.connect(self.db_name)
        cursor = conn.cursor()

        cursor.execute('''
            INSERT OR REPLACE INTO sites (site_id, start_time, end_time, latitude, longitude)
            VALUES (?, ?, ?, ?, ?)
        ''', (site_id, start_time, end_time, latitude, longitude))

        conn.commit()
        conn.close()
        return site_id

    def get_sites(self):
        conn = sqlite3.connect(self.db_name)
        cursor = conn.cursor()

        cursor.execute('''
            SELECT site_id, start_time, end_time, latitude, longitude
            FROM sites
            ORDER BY site_id
        ''')

        rows = cursor.fetchall()
        conn.close()

        return [{
            'site_id': row[0],
            'start_time': row[1],
            'end_time': row[2],
            'latitude': row[3],
            'longitude': row[4],
        } for row in rows]

    def add_fix(self, timestamp, latitude, longitude, site_id, source=0):
        """位置を追加"""
        conn = sqlite3.connect(self.db_name)
        cursor = conn.cursor()

        cursor.execute('''
            INSERT INTO fixes (timestamp, latitude, longitude, site_id, source)
            VALUES (?, ?, ?, ?, ?)
        ''', (timestamp, latitude, longitude, site_id, source))

        fix_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return fix_id

    def get_fixes(self, site_id=None):
        conn = sqlite3.connect(self.db_name)
        cursor = conn.cursor()

        if site_id is None:
            cursor.execute('''
                SELECT timestamp, latitude, longitude, site_id, source
                FROM fixes ORDER BY timestamp
            ''')
        else:
            cursor.execute('''
                SELECT timestamp, latitude, longitude, site_id, source
                FROM fixes WHERE site_id = ? ORDER BY timestamp
            ''', (site_id,))

        rows = cursor.fetchall()
        conn.close()

        return [{
            'timestamp': row[0],
            'latitude': row[1],
            'longitude': row[2],
            'site_id': row[3],
            'source': row[4],
        } for row in rows]

    def add_magnetometer(self, timestamp, source, raw, corrected=None, arm_angle=None):
        """磁力計の値を保存（補正できなければ raw のみ, calibrated=0）"""
        conn = sqlite3.connect(self.db_name)
        cursor = conn.cursor()

        corrected_values = tuple(corrected) if corrected is not None else (None, None, None)
        cursor.execute('''
            INSERT INTO magnetometer (timestamp, source, raw_x, raw_y, raw_z,
                                      corrected_x, corrected_y, corrected_z, arm_angle, calibrated)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (timestamp, source, *raw, *corrected_values, arm_angle, int(corrected is not None)))

        row_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return row_id

    def get_magnetometer(self, limit=100):
        conn = sqlite3.connect(self.db_name)
        cursor = conn.cursor()

        cursor.execute('''
            SELECT timestamp, source, raw_x, raw_y, raw_z,
                   corrected_x, corrected_y, corrected_z, arm_angle, calibrated
            FROM magnetometer
            ORDER BY timestamp DESC
            LIMIT ?
        ''', (limit,))

        rows = cursor.fetchall()
        conn.close()

        return [{
            'timestamp': row[0],
            'source': row[1],
            'raw': [row[2], row[3], row[4]],
            'corrected': None if not row[9] else [row[5], row[6], row[7]],
            'arm_angle': row[8],
            'calibrated': bool(row[9]),
        } for row in rows]

    def backup_to_json(self, backup_file=None):
        """JSONファイルにバックアップ"""
        if not backup_file:
            backup_file = f"gateway_backup_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"

        data = {
            'sites': self.get_sites(),
            'fixes': self.get_fixes(),
            'magnetometer': self.get_magnetometer(limit=-1),
        }
        with open(backup_file, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2)

        return backup_file
