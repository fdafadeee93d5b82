import os
import uvicorn
import logging
from typing import Optional
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel
from datetime import datetime

# 配置日志
from config import DATABASE_PATH, RUNS_DIR, API_PORT, LOG_LEVEL, MAX_WORKERS
logging.basicConfig(level=LOG_LEVEL)
logger = logging.getLogger(__name__)

# 导入项目模块
from database import RunStore
from errors import MoffleError
from mdp_core import LatentLowRankMDP, exact_policy_value, policy_from_dict, value_iteration
from storage import load_json_file, load_reward_file

# 初始化运行记录库
store = RunStore(DATABASE_PATH)

# 初始化FastAPI
app = FastAPI(
    title="MOFFLE 运行查询服务",
    description="只读查询运行记录，并对已保存的策略做精确评估",
    version="0.1.0"
)

# 配置跨域
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class EvalRequest(BaseModel):
    env_path: str
    policy_path: str
    reward_path: Optional[str] = None


# 标准化响应
def standard_response(success: bool, data: dict = None, message: str = "", status_code: int = 200):
    return JSONResponse({
        "success": success,
        "message": message,
        "data": data,
        "timestamp": datetime.now().isoformat()
    }, status_code=status_code)


# ==================== API接口 ====================
@app.get("/health", summary="健康检查")
async def health_check():
    """服务健康检查与配置状态"""
    return standard_response(
        success=True,
        data={
            "status": "healthy",
            "database": store.db_path,
            "runs_dir": RUNS_DIR,
            "max_workers": MAX_WORKERS,
        },
        message="服务运行正常"
    )


@app.get("/runs", summary="运行列表")
async def list_runs(limit: int = 20):
    return standard_response(success=True, data={"runs": store.list_runs(limit)}, message="获取运行列表成功")


@app.get("/runs/{run_id}", summary="运行详情")
async def get_run(run_id: str):
    """运行记录、阶段历史以及 report.json（若存在）"""
    run = store.get_run(run_id)
    if run is None:
        return standard_response(success=False, message=f"运行不存在: {run_id}", status_code=404)

    run["stages"] = store.get_run_stages(run_id)
    report_path = os.path.join(run["out_dir"], "report.json")
    run["report"] = load_json_file(report_path) if os.path.exists(report_path) else None
    return standard_response(success=True, data=run, message="获取运行详情成功")


@app.post("/eval", summary="精确评估策略")
async def evaluate_policy(request: EvalRequest):
    """读取环境、策略和奖励文件，用动态规划计算精确价值"""
    for path in (request.env_path, request.policy_path, request.reward_path):
        if path and not os.path.exists(path):
            return standard_response(success=False, message=f"文件不存在: {path}", status_code=404)

    try:
        mdp = LatentLowRankMDP.from_dict(load_json_file(request.env_path))
        policy = policy_from_dict(load_json_file(request.policy_path))
        if request.reward_path:
            reward = load_reward_file(request.reward_path)
        else:
            reward = [[[0.0] * mdp.num_actions] * mdp.num_states(h) for h in range(mdp.horizon)]

        value = exact_policy_value(mdp, policy, reward)
        data = {"value": value}
        if request.reward_path:
            optimal = value_iteration(mdp, reward).value
            data.update({"optimal": optimal, "gap": optimal - value})
        return standard_response(success=True, data=data, message="策略评估完成")

    except (MoffleError, KeyError, ValueError, TypeError) as e:
        logger.error(f"策略评估失败: {e}")
        return standard_response(success=False, message=f"评估失败: {str(e)}", status_code=400)


# 启动函数
def main(port: int = API_PORT):
    """启动FastAPI服务"""
    print("=" * 60)
    print(" 配置状态检查")
    print("=" * 60)
    print(f" 数据库路径: {DATABASE_PATH}")
    print(f" 运行目录: {RUNS_DIR}")
    print(f" 并行线程数: {MAX_WORKERS}")
    print(f" 日志级别: {LOG_LEVEL}")
    print("=" * 60)

    print(f"\n MOFFLE 查询服务启动中...")
    print(f" API地址: http://0.0.0.0:{port}")
    print(f" API文档: http://0.0.0.0:{port}/docs")

    uvicorn.run(
        "main_api:app",
        host="0.0.0.0",
        port=port,
        log_level=LOG_LEVEL.lower()
    )


if __name__ == "__main__":
    main()
