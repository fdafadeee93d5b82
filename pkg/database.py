import sqlite3
import logging
import json
import os
from typing import List, Dict, Tuple, Optional, Mapping, Any
from config import DATABASE_PATH

logger = logging.getLogger(__name__)


def init_database(path: str = DATABASE_PATH):
    """初始化运行记录数据库"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    conn = sqlite3.connect(path)
    cursor = conn.cursor()

    # 运行表
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id TEXT UNIQUE NOT NULL,
            out_dir TEXT NOT NULL,
            seed INTEGER,
            config_json TEXT,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
            updated_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        )
    ''')

    # 阶段记录表
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS stages (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id TEXT NOT NULL,
            stage TEXT NOT NULL,
            status TEXT NOT NULL,
            message TEXT,
            metadata TEXT,
            timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
            FOREIGN KEY (run_id) REFERENCES runs (run_id)
        )
    ''')

    # 指标表
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS metrics (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id TEXT NOT NULL,
            name TEXT NOT NULL,
            value REAL,
            FOREIGN KEY (run_id) REFERENCES runs (run_id),
            UNIQUE(run_id, name)
        )
    ''')

    conn.commit()
    conn.close()
    logger.info(f"数据库初始化完成: {path}")


class RunStore:
    def __init__(self, db_path: str = DATABASE_PATH):
        self.db_path = db_path
        init_database(db_path)

    def get_connection(self):
        return sqlite3.connect(self.db_path)

    def get_or_create_run(self, run_id: str, out_dir: str, seed: int,
                          config: Optional[Mapping[str, Any]] = None) -> Tuple[int, bool]:
        """获取或创建运行记录，已存在时刷新配置"""
        conn = self.get_connection()
        cursor = conn.cursor()
        config_str = json.dumps(dict(config or {}), ensure_ascii=False, sort_keys=True)

        cursor.execute('SELECT id FROM runs WHERE run_id = ?', (run_id,))
        result = cursor.fetchone()

        if result:
            row_id = result[0]
            cursor.execute(
                'UPDATE runs SET out_dir = ?, seed = ?, config_json = ?, updated_at = CURRENT_TIMESTAMP WHERE id = ?',
                (out_dir, seed, config_str, row_id)
            )
            is_new = False
        else:
            cursor.execute(
                'INSERT INTO runs (run_id, out_dir, seed, config_json) VALUES (?, ?, ?, ?)',
                (run_id, out_dir, seed, config_str)
            )
            row_id = cursor.lastrowid
            is_new = True

        conn.commit()
        conn.close()
        logger.info(f"运行记录: run_id={run_id}, row_id={row_id}, is_new={is_new}")
        return row_id, is_new

    def add_stage(self, run_id: str, stage: str, status: str, message: str = None, metadata: dict = None):
        """记录一个流水线阶段的状态"""
        conn = self.get_connection()
        cursor = conn.cursor()

        metadata_str = None
        if metadata:
            metadata_str = json.dumps(metadata, ensure_ascii=False)

        cursor.execute(
            'INSERT INTO stages (run_id, stage, status, message, metadata) VALUES (?, ?, ?, ?, ?)',
            (run_id, stage, status, message, metadata_str)
        )
        cursor.execute('UPDATE runs SET updated_at = CURRENT_TIMESTAMP WHERE run_id = ?', (run_id,))

        conn.commit()
        conn.close()
        logger.info(f"阶段记录: run_id={run_id}, stage={stage}, status={status}")

    def record_metrics(self, run_id: str, metrics: Mapping[str, float]):
        conn = self.get_connection()
        cursor = conn.cursor()
        cursor.executemany(
            'INSERT OR REPLACE INTO metrics (run_id, name, value) VALUES (?, ?, ?)',
            [(run_id, name, float(value)) for name, value in metrics.items()]
        )
        conn.commit()
        conn.close()
        logger.info(f"写入指标: run_id={run_id}, count={len(metrics)}")

    def get_run(self, run_id: str) -> Optional[Dict]:
        conn = self.get_connection()
        cursor = conn.cursor()
        cursor.execute(
            'SELECT run_id, out_dir, seed, config_json, created_at, updated_at FROM runs WHERE run_id = ?',
            (run_id,)
        )
        row = cursor.fetchone()
        if row is None:
            conn.close()
            return None

        cursor.execute('SELECT name, value FROM metrics WHERE run_id = ? ORDER BY name', (run_id,))
        metrics = {name: value for name, value in cursor.fetchall()}
        conn.close()

        try:
            config = json.loads(row[3]) if row[3] else {}
        except json.JSONDecodeError:
            config = {}
        return {
            'run_id': row[0],
            'out_dir': row[1],
            'seed': row[2],
            'config': config,
            'created_at': row[4],
            'updated_at': row[5],
            'metrics': metrics,
        }

    def list_runs(self, limit: int = 20) -> List[Dict]:
        conn = self.get_connection()
        cursor = conn.cursor()
        cursor.execute('''
            SELECT run_id, out_dir, seed, created_at, updated_at
            FROM runs
            ORDER BY updated_at DESC, id DESC
            LIMIT ?
        ''', (limit,))
        runs = [
            {'run_id': r[0], 'out_dir': r[1], 'seed': r[2], 'created_at': r[3], 'updated_at': r[4]}
            for r in cursor.fetchall()
        ]
        conn.close()
        return runs

    def get_run_stages(self, run_id: str) -> List[Dict]:
        """按时间正序返回阶段记录"""
        conn = self.get_connection()
        cursor = conn.cursor()
        cursor.execute('''
            SELECT stage, status, message, metadata, timestamp
            FROM stages
            WHERE run_id = ?
            ORDER BY id
        ''', (run_id,))

        stages = []
        for row in cursor.fetchall():
            metadata = {}
            if row[3]:
                try:
                    metadata = json.loads(row[3])
                except json.JSONDecodeError:
                    metadata = {}
            stages.append({
                'stage': row[0],
                'status': row[1],
                'message': row[2],
                'metadata': metadata,
                'timestamp': row[4],
            })

        conn.close()
        return stages
