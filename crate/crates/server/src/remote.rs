//! Blocking HTTP client for a running server, used by the `client`
//! subcommand.

use chrono::{DateTime, SecondsFormat, Utc};
use fieldsync_core::client::{TaskTransport, TransportError};
use fieldsync_core::diffsync::SyncPayload;
use fieldsync_core::document::Document;
use fieldsync_core::engine::ServerFrame;
use fieldsync_core::lock::LockState;
use fieldsync_core::task::{MobileUser, Notification, SyncAck, Task, TaskSyncRequest};
use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    #[serde(default)]
    message: String,
    #[serde(default)]
    state: Option<LockState>,
}

pub struct Remote {
    base: String,
    http: Client,
}

impl Remote {
    pub fn new(base: &str) -> Remote {
        Remote { base: base.trim_end_matches('/').to_owned(), http: Client::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, request: RequestBuilder) -> Result<T, TransportError> {
        let response = request.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = response.status();
        let body = response.bytes().map_err(|e| TransportError::Network(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&body).map_err(|e| TransportError::Network(format!("bad response: {e}")));
        }
        Err(match serde_json::from_slice::<ErrorBody>(&body) {
            Ok(e) => TransportError::Rejected { code: e.error, message: e.message, state: e.state },
            Err(_) => TransportError::Rejected {
                code: status.as_u16().to_string(),
                message: String::from_utf8_lossy(&body).into_owned(),
                state: None,
            },
        })
    }

    pub fn register_user(&self, user_id: &str, display_name: &str) -> Result<MobileUser, TransportError> {
        self.send(self.http.post(self.url("/users")).json(&json!({"user_id": user_id, "display_name": display_name})))
    }

    pub fn create_doc(&self, template: Option<&str>) -> Result<String, TransportError> {
        #[derive(Deserialize)]
        struct Created {
            doc_id: String,
        }
        let created: Created = self.send(self.http.post(self.url("/docs")).json(&json!({"template": template})))?;
        Ok(created.doc_id)
    }

    pub fn document(&self, doc_id: &str) -> Result<Document, TransportError> {
        self.send(self.http.get(self.url(&format!("/docs/{doc_id}"))))
    }

    pub fn sync(&self, doc_id: &str, payload: &SyncPayload) -> Result<ServerFrame, TransportError> {
        self.send(self.http.post(self.url(&format!("/docs/{doc_id}/sync"))).json(payload))
    }
}

impl TaskTransport for Remote {
    fn sync_task(&mut self, user: &str, request: &TaskSyncRequest) -> Result<SyncAck, TransportError> {
        let url = self.url(&format!("/tasks/{}/sync", request.task));
        self.send(self.http.post(url).bearer_auth(user).json(request))
    }

    fn list_tasks(&mut self, user: &str) -> Result<Vec<Task>, TransportError> {
        self.send(self.http.get(self.url("/tasks")).bearer_auth(user))
    }

    fn poll_notifications(&mut self, user: &str, since: Option<DateTime<Utc>>) -> Result<Vec<Notification>, TransportError> {
        let mut request = self.http.get(self.url("/notifications")).bearer_auth(user);
        if let Some(since) = since {
            request = request.query(&[("since", since.to_rfc3339_opts(SecondsFormat::Micros, true))]);
        }
        self.send(request)
    }

    fn dismiss(&mut self, user: &str, task_id: &str) -> Result<(), TransportError> {
        let _: serde_json::Value = self.send(self.http.post(self.url(&format!("/locks/{task_id}/dismiss"))).bearer_auth(user))?;
        Ok(())
    }
}
