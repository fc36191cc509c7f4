use serde_json::{json, Value};

/// OpenAPI description of the `/v1` endpoints.
pub fn document() -> Value {
    let error = json!({ "$ref": "#/components/schemas/ErrorResponse" });
    let err = |desc: &str| json!({ "description": desc, "content": { "application/json": { "schema": error } } });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "Neural scene decoration service", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/v1/generate": {
                "post": {
                    "summary": "Furnish an empty-room photograph according to a layout document",
                    "requestBody": {
                        "required": true,
                        "content": {
                            "application/json": { "schema": { "$ref": "#/components/schemas/GenerateRequest" } },
                            "multipart/form-data": { "schema": {
                                "type": "object",
                                "required": ["background", "layout"],
                                "properties": {
                                    "background": { "type": "string", "format": "binary" },
                                    "layout": { "type": "string", "description": "layout document JSON" },
                                    "latent_seed": { "type": "integer", "minimum": 0 },
                                    "size_strategy": { "type": "string", "enum": ["gt", "median", "mean"] }
                                }
                            } }
                        }
                    },
                    "responses": {
                        "200": { "description": "Generated image", "content": { "application/json": {
                            "schema": { "$ref": "#/components/schemas/GenerateResponse" } } } },
                        "400": err("Invalid request; `error.field` names the offending field"),
                        "413": err("Upload or decoded image too large"),
                        "503": err("Model not loaded or queue full")
                    }
                }
            },
            "/v1/classes": { "get": { "summary": "Class vocabulary with display colours", "responses": {
                "200": { "description": "Classes", "content": { "application/json": {
                    "schema": { "$ref": "#/components/schemas/ClassesResponse" } } } } } } },
            "/v1/health": { "get": { "summary": "Readiness, model id, uptime and queue depth", "responses": {
                "200": { "description": "Status", "content": { "application/json": {
                    "schema": { "$ref": "#/components/schemas/HealthResponse" } } } } } } },
            "/v1/spec": { "get": { "summary": "This document", "responses": { "200": { "description": "OpenAPI document" } } } }
        },
        "components": { "schemas": {
            "GenerateRequest": {
                "type": "object",
                "required": ["background", "layout"],
                "additionalProperties": false,
                "properties": {
                    "background": { "type": "string", "format": "byte", "description": "base64 PNG or JPEG" },
                    "layout": { "$ref": "#/components/schemas/LayoutDocument" },
                    "latent_seed": { "type": "integer", "minimum": 0, "default": 0 },
                    "size_strategy": { "type": "string", "enum": ["gt", "median", "mean"], "default": "median" }
                }
            },
            "LayoutDocument": {
                "type": "object",
                "required": ["version", "mode", "canvas", "objects"],
                "description": "Canvas is either the model canvas or the background's own size",
                "properties": {
                    "version": { "type": "integer", "enum": [1] },
                    "mode": { "type": "string", "enum": ["box", "point"] },
                    "canvas": { "type": "object", "required": ["width", "height"], "properties": {
                        "width": { "type": "integer", "minimum": 1 }, "height": { "type": "integer", "minimum": 1 } } },
                    "objects": { "type": "array", "items": { "type": "object", "required": ["class"], "properties": {
                        "class": { "type": "string" },
                        "box": { "type": "object", "required": ["x0", "y0", "x1", "y1"], "properties": {
                            "x0": { "type": "integer" }, "y0": { "type": "integer" },
                            "x1": { "type": "integer" }, "y1": { "type": "integer" } } },
                        "point": { "type": "object", "required": ["cx", "cy"], "properties": {
                            "cx": { "type": "number" }, "cy": { "type": "number" }, "size": { "type": "number" } } }
                    } } }
                }
            },
            "Letterbox": { "type": "object", "properties": {
                "scale": { "type": "number" }, "offset_x": { "type": "number" }, "offset_y": { "type": "number" },
                "source_width": { "type": "integer" }, "source_height": { "type": "integer" }, "size": { "type": "integer" } } },
            "GenerateResponse": { "type": "object", "properties": {
                "image": { "type": "string", "format": "byte", "description": "base64 PNG" },
                "width": { "type": "integer" }, "height": { "type": "integer" },
                "latency_ms": { "type": "number" }, "model_id": { "type": "string" },
                "request_id": { "type": "string" }, "latent_seed": { "type": "integer" },
                "transform": { "$ref": "#/components/schemas/Letterbox" } } },
            "ClassesResponse": { "type": "object", "properties": { "classes": { "type": "array", "items": {
                "type": "object", "properties": {
                    "id": { "type": "integer" }, "name": { "type": "string" },
                    "color": { "type": "array", "items": { "type": "integer" }, "minItems": 3, "maxItems": 3 } } } } } },
            "HealthResponse": { "type": "object", "properties": {
                "ready": { "type": "boolean" }, "model_id": { "type": "string", "nullable": true },
                "uptime_s": { "type": "number" }, "queue_depth": { "type": "integer" },
                "queue_capacity": { "type": "integer" }, "error": { "type": "string", "nullable": true } } },
            "ErrorResponse": { "type": "object", "properties": { "error": { "type": "object", "properties": {
                "code": { "type": "string" }, "message": { "type": "string" }, "field": { "type": "string" } } } } }
        } }
    })
}
