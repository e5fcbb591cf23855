//! HTTP management API under `/api/v1`.
//!
//! Every non-2xx response carries exactly one [`ApiError`] body.

use std::future::Future;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::Agent;
use crate::lifecycle::{InstanceSpec, InstanceState, LifecycleError};
use crate::model::{ConfigPatch, PluginKind};

const MAX_BUNDLE_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Vec<Value>>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status: status.as_u16(), code: code.to_string(), message: message.into(), details: None }
    }

    fn with_details(mut self, details: Vec<Value>) -> Self {
        self.details = Some(details);
        self
    }
}

pub fn status_of(err: &LifecycleError) -> StatusCode {
    match err {
        LifecycleError::UnknownPlugin(_) | LifecycleError::UnknownInstance(_) => StatusCode::NOT_FOUND,
        LifecycleError::RegisterConflict(_)
        | LifecycleError::PluginInUse { .. }
        | LifecycleError::BuiltinImmutable(_)
        | LifecycleError::InstanceExists(_)
        | LifecycleError::AlreadyTerminal(..)
        | LifecycleError::IllegalState(..) => StatusCode::CONFLICT,
        LifecycleError::MalformedBundle(_) | LifecycleError::SchemaInvalid(_) | LifecycleError::InvalidConfig(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        LifecycleError::SpawnFailed { .. } => StatusCode::BAD_GATEWAY,
    }
}

impl From<LifecycleError> for ApiError {
    fn from(err: LifecycleError) -> Self {
        let base = ApiError::new(status_of(&err), err.code(), err.to_string());
        match err {
            LifecycleError::InvalidConfig(v) => {
                base.with_details(v.iter().map(|x| serde_json::to_value(x).unwrap_or(Value::Null)).collect())
            }
            LifecycleError::SchemaInvalid(p) => base.with_details(p.into_iter().map(|m| json!({"message": m})).collect()),
            LifecycleError::PluginInUse { instances, .. } => {
                base.with_details(instances.into_iter().map(|i| json!({"instanceId": i})).collect())
            }
            LifecycleError::SpawnFailed { instance_id, .. } => base.with_details(vec![json!({"instanceId": instance_id})]),
            _ => base,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| {
        if e.is_data() {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string())
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string())
        }
    })
}

fn kind_path(kind: PluginKind) -> &'static str {
    match kind {
        PluginKind::Collector => "collectors",
        PluginKind::Publisher => "publishers",
    }
}

/// Builds the router for `agent`.
pub fn router(agent: Arc<Agent>) -> Router {
    let mut api = Router::new()
        .route("/status", get(status))
        .route("/plugins", get(list_plugins).post(upload_plugin).layer(DefaultBodyLimit::max(MAX_BUNDLE_BYTES)))
        .route("/plugins/:id", get(get_plugin).delete(remove_plugin));
    for kind in [PluginKind::Collector, PluginKind::Publisher] {
        let base = format!("/{}", kind_path(kind));
        api = api
            .route(
                &base,
                get(move |s: State<Arc<Agent>>| list_instances(s, kind))
                    .post(move |s: State<Arc<Agent>>, body: Bytes| create_instance(s, kind, body)),
            )
            .route(
                &format!("{base}/:id"),
                get(move |s: State<Arc<Agent>>, p: Path<String>| get_instance(s, kind, p))
                    .delete(move |s: State<Arc<Agent>>, p: Path<String>| destroy_instance(s, kind, p)),
            )
            .route(
                &format!("{base}/:id/config"),
                patch(move |s: State<Arc<Agent>>, p: Path<String>, body: Bytes| reconfigure(s, kind, p, body)),
            );
    }
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(middleware::map_response(ensure_error_body))
        .layer(middleware::from_fn_with_state(agent.clone(), authorize))
        .with_state(agent)
}

fn token_matches(expected: &str, header: Option<&HeaderValue>) -> bool {
    let Some(presented) = header.and_then(|h| h.to_str().ok()).and_then(|h| h.strip_prefix("Bearer ")) else {
        return false;
    };
    let (a, b) = (expected.as_bytes(), presented.trim().as_bytes());
    // Length leaks, contents do not.
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn authorize(State(agent): State<Arc<Agent>>, req: Request, next: Next) -> Response {
    if let Some(token) = &agent.auth_token {
        if !token_matches(token, req.headers().get(header::AUTHORIZATION)) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

/// Replaces framework-generated error responses (405, body-limit 413,
/// ...) with an ApiError body.
async fn ensure_error_body(resp: Response) -> Response {
    let status = resp.status();
    if status.is_success() || status.is_redirection() {
        return resp;
    }
    let is_json = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    if is_json {
        return resp;
    }
    let code = match status {
        StatusCode::METHOD_NOT_ALLOWED => "method_not_allowed",
        StatusCode::PAYLOAD_TOO_LARGE => "payload_too_large",
        StatusCode::NOT_FOUND => "not_found",
        StatusCode::UNSUPPORTED_MEDIA_TYPE => "unsupported_media_type",
        s if s.is_client_error() => "bad_request",
        _ => "internal",
    };
    let reason = status.canonical_reason().unwrap_or("error");
    let mut out = ApiError::new(status, code, reason).into_response();
    // Keep e.g. the Allow header of a 405.
    for (name, value) in resp.headers() {
        if name != header::CONTENT_TYPE && name != header::CONTENT_LENGTH {
            out.headers_mut().insert(name.clone(), value.clone());
        }
    }
    out
}

async fn status(State(agent): State<Arc<Agent>>) -> impl IntoResponse {
    Json(agent.status())
}

async fn list_plugins(State(agent): State<Arc<Agent>>) -> impl IntoResponse {
    Json(agent.lifecycle.registry.list())
}

async fn get_plugin(State(agent): State<Arc<Agent>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    agent
        .lifecycle
        .registry
        .descriptor(&id)
        .map(Json)
        .ok_or_else(|| LifecycleError::UnknownPlugin(id).into())
}

async fn upload_plugin(State(agent): State<Arc<Agent>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let descriptor = agent.lifecycle.upload_plugin(&body).await?;
    Ok((StatusCode::CREATED, Json(descriptor)))
}

async fn remove_plugin(State(agent): State<Arc<Agent>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    agent.lifecycle.remove_plugin(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_instances(State(agent): State<Arc<Agent>>, kind: PluginKind) -> impl IntoResponse {
    Json(agent.lifecycle.manager(kind).list(false))
}

async fn create_instance(State(agent): State<Arc<Agent>>, kind: PluginKind, body: Bytes) -> ApiResult<Response> {
    let spec: InstanceSpec = parse_json(&body)?;
    let record = agent.lifecycle.manager(kind).instantiate(spec).await?;
    let mut resp = (StatusCode::CREATED, Json(&record)).into_response();
    let location = format!("/api/v1/{}/{}", kind_path(kind), record.instance_id);
    if let Ok(v) = HeaderValue::from_str(&location) {
        resp.headers_mut().insert(header::LOCATION, v);
    }
    Ok(resp)
}

async fn get_instance(
    State(agent): State<Arc<Agent>>,
    kind: PluginKind,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let detail = agent.lifecycle.manager(kind).detail(&id)?;
    // Destroyed instances are gone as far as clients are concerned.
    if detail.record.state == InstanceState::Stopped {
        return Err(LifecycleError::UnknownInstance(id).into());
    }
    Ok(Json(detail))
}

async fn destroy_instance(
    State(agent): State<Arc<Agent>>,
    kind: PluginKind,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    agent.lifecycle.manager(kind).destroy(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn reconfigure(
    State(agent): State<Arc<Agent>>,
    kind: PluginKind,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let patch: ConfigPatch = parse_json(&body)?;
    let effective = agent.lifecycle.manager(kind).reconfigure(&id, patch).await?;
    Ok(Json(effective))
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    agent: Arc<Agent>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(agent)).with_graceful_shutdown(shutdown).await
}

/// Reads a whole response body; for in-process callers.
pub async fn body_bytes(body: Body) -> Result<Bytes, axum::Error> {
    axum::body::to_bytes(body, usize::MAX).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::clock::VirtualClock;
    use axum::http::Method;
    use tower::ServiceExt;

    fn app(token: Option<&str>) -> Router {
        let cfg = AgentConfig { auth_token: token.map(str::to_string), ..Default::default() };
        router(Arc::new(Agent::new(&cfg, Arc::new(VirtualClock::default()))))
    }

    async fn call(app: &Router, method: Method, uri: &str, body: &str, token: Option<&str>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        let resp = app.clone().oneshot(req.body(Body::from(body.to_string())).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = body_bytes(resp.into_body()).await.unwrap();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    fn is_api_error(v: &Value) -> bool {
        v["code"].is_string() && v["message"].is_string()
    }

    #[tokio::test(start_paused = true)]
    async fn auth_rules() {
        let app = app(Some("s3cret"));
        let (s, body) = call(&app, Method::GET, "/api/v1/status", "", None).await;
        assert_eq!(s, StatusCode::UNAUTHORIZED);
        assert_eq!(body["code"], "unauthorized");
        let (s, _) = call(&app, Method::GET, "/api/v1/status", "", Some("wrong")).await;
        assert_eq!(s, StatusCode::UNAUTHORIZED);
        let (s, body) = call(&app, Method::GET, "/api/v1/status", "", Some("s3cret")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(body["plugins"]["collector"], 2);
    }

    #[tokio::test(start_paused = true)]
    async fn error_bodies_everywhere() {
        let app = app(None);
        for (method, uri, body) in [
            (Method::GET, "/nowhere", ""),
            (Method::PUT, "/api/v1/status", ""),
            (Method::POST, "/api/v1/collectors", "{not json"),
            (Method::POST, "/api/v1/collectors", r#"{"pluginId":"synthetic-sampler","oops":1}"#),
            (Method::POST, "/api/v1/plugins", "garbage"),
            (Method::GET, "/api/v1/publishers/pub-9", ""),
            (Method::DELETE, "/api/v1/plugins/synthetic-sampler", ""),
        ] {
            let (s, v) = call(&app, method.clone(), uri, body, None).await;
            assert!(!s.is_success(), "{method} {uri}");
            assert!(is_api_error(&v), "{method} {uri}: {v}");
        }
    }

    #[tokio::test(start_paused = true)]
    async fn instance_crud() {
        let app = app(None);
        let create = r#"{"pluginId":"synthetic-sampler","indicators":["load"],"samplingPeriod":"100ms"}"#;
        let (s, rec) = call(&app, Method::POST, "/api/v1/collectors", create, None).await;
        assert_eq!(s, StatusCode::CREATED);
        assert_eq!(rec["state"], "Running");
        let (s, cfg) =
            call(&app, Method::PATCH, "/api/v1/collectors/col-1/config", r#"{"samplingPeriod":"500ms"}"#, None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(cfg["samplingPeriod"], "500ms");
        let (s, err) =
            call(&app, Method::PATCH, "/api/v1/collectors/col-1/config", r#"{"params":{"bogus":1}}"#, None).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(err["code"], "invalid_config");
        assert_eq!(err["details"][0]["violation"], "unknownParam");
        let (_, detail) = call(&app, Method::GET, "/api/v1/collectors/col-1", "", None).await;
        assert_eq!(detail["config"]["samplingPeriod"], "500ms");
        assert_eq!(detail["audit"].as_array().unwrap().len(), 2);
        let (s, _) = call(&app, Method::DELETE, "/api/v1/collectors/col-1", "", None).await;
        assert_eq!(s, StatusCode::NO_CONTENT);
        let (s, _) = call(&app, Method::GET, "/api/v1/collectors/col-1", "", None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, err) = call(&app, Method::DELETE, "/api/v1/collectors/col-1", "", None).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(err["code"], "already_terminal");
    }
}
