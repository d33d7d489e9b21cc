//! XML bodies exchanged with endpoints: WebDAV multistatus and S3
//! ListBucketResult. Parsing goes through a small namespace-agnostic tree
//! (elements are matched by local name).

use std::fmt::Write;

use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;

#[derive(Debug, Default, Clone)]
pub(crate) struct Element {
    pub name: String,
    pub children: Vec<Element>,
    pub text: String,
}

impl Element {
    pub fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }

    pub fn text_of(&self, name: &str) -> Option<&str> {
        self.child(name).map(|c| c.text.trim())
    }
}

fn local(name: &[u8]) -> String {
    let s = String::from_utf8_lossy(name);
    match s.rsplit_once(':') {
        Some((_, l)) => l.to_string(),
        None => s.into_owned(),
    }
}

pub(crate) fn parse(xml: &str) -> Result<Element, String> {
    let mut reader = Reader::from_str(xml);
    let mut stack: Vec<Element> = vec![Element::default()];
    loop {
        match reader.read_event().map_err(|e| e.to_string())? {
            Event::Start(e) => stack.push(Element {
                name: local(e.local_name().as_ref()),
                ..Default::default()
            }),
            Event::Empty(e) => {
                let el = Element {
                    name: local(e.local_name().as_ref()),
                    ..Default::default()
                };
                stack.last_mut().expect("root").children.push(el);
            }
            Event::End(_) => {
                let el = stack.pop().ok_or("unbalanced end tag")?;
                stack.last_mut().ok_or("unbalanced end tag")?.children.push(el);
            }
            Event::Text(t) => {
                let text = t.decode().map_err(|e| e.to_string())?;
                stack.last_mut().expect("root").text.push_str(&text);
            }
            Event::CData(t) => {
                let text = t.decode().map_err(|e| e.to_string())?;
                stack.last_mut().expect("root").text.push_str(&text);
            }
            Event::GeneralRef(r) => {
                let resolved = match r.resolve_char_ref().map_err(|e| e.to_string())? {
                    Some(c) => c,
                    None => match r.decode().map_err(|e| e.to_string())?.as_ref() {
                        "lt" => '<',
                        "gt" => '>',
                        "amp" => '&',
                        "apos" => '\'',
                        "quot" => '"',
                        other => return Err(format!("unknown entity &{other};")),
                    },
                };
                stack.last_mut().expect("root").text.push(resolved);
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if stack.len() != 1 {
        return Err("unclosed element".into());
    }
    let mut root = stack.pop().expect("root");
    match root.children.len() {
        1 => Ok(root.children.remove(0)),
        _ => Err("expected exactly one document element".into()),
    }
}

/// One `<D:response>` of a multistatus body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DavResource {
    /// Href exactly as it appeared (usually percent-encoded).
    pub href: String,
    pub is_collection: bool,
    pub content_length: Option<u64>,
    pub last_modified: Option<String>,
}

pub(crate) fn parse_multistatus(xml: &str) -> Result<Vec<DavResource>, String> {
    let root = parse(xml)?;
    if root.name != "multistatus" {
        return Err(format!("expected multistatus, found {}", root.name));
    }
    root.children_named("response")
        .map(|resp| {
            let href = resp.text_of("href").ok_or("response without href")?.to_string();
            let mut res = DavResource {
                href,
                is_collection: false,
                content_length: None,
                last_modified: None,
            };
            for propstat in resp.children_named("propstat") {
                let ok = propstat
                    .text_of("status")
                    .is_none_or(|s| s.split_whitespace().nth(1) == Some("200"));
                let Some(prop) = propstat.child("prop").filter(|_| ok) else {
                    continue;
                };
                if prop.child("resourcetype").and_then(|r| r.child("collection")).is_some() {
                    res.is_collection = true;
                }
                if let Some(len) = prop.text_of("getcontentlength").filter(|s| !s.is_empty()) {
                    res.content_length = Some(len.parse().map_err(|_| format!("bad getcontentlength {len:?}"))?);
                }
                if let Some(m) = prop.text_of("getlastmodified").filter(|s| !s.is_empty()) {
                    res.last_modified = Some(m.to_string());
                }
            }
            Ok(res)
        })
        .collect()
}

/// Writes a DAV: multistatus document.
pub(crate) struct MultistatusWriter {
    out: String,
}

impl MultistatusWriter {
    pub fn new() -> Self {
        MultistatusWriter {
            out: String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<D:multistatus xmlns:D=\"DAV:\">\n"),
        }
    }

    pub fn resource(&mut self, encoded_href: &str, is_collection: bool, size: Option<u64>, modified: Option<&str>) {
        let _ = write!(
            self.out,
            "<D:response><D:href>{}</D:href><D:propstat><D:prop>",
            escape(encoded_href)
        );
        if is_collection {
            self.out.push_str("<D:resourcetype><D:collection/></D:resourcetype>");
        } else {
            self.out.push_str("<D:resourcetype/>");
            if let Some(size) = size {
                let _ = write!(self.out, "<D:getcontentlength>{size}</D:getcontentlength>");
            }
        }
        if let Some(m) = modified {
            let _ = write!(self.out, "<D:getlastmodified>{}</D:getlastmodified>", escape(m));
        }
        self.out
            .push_str("</D:prop><D:status>HTTP/1.1 200 OK</D:status></D:propstat></D:response>\n");
    }

    pub fn finish(mut self) -> String {
        self.out.push_str("</D:multistatus>\n");
        self.out
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub(crate) struct BucketPage {
    pub objects: Vec<(String, u64)>,
    pub common_prefixes: Vec<String>,
    pub next_token: Option<String>,
}

pub(crate) fn parse_list_bucket(xml: &str) -> Result<BucketPage, String> {
    let root = parse(xml)?;
    if root.name != "ListBucketResult" {
        return Err(format!("expected ListBucketResult, found {}", root.name));
    }
    let mut page = BucketPage::default();
    for c in root.children_named("Contents") {
        let key = c.child("Key").ok_or("Contents without Key")?.text.clone();
        let size = c.text_of("Size").unwrap_or("0");
        let size = size.parse().map_err(|_| format!("bad Size {size:?}"))?;
        page.objects.push((key, size));
    }
    for p in root.children_named("CommonPrefixes") {
        page.common_prefixes
            .push(p.child("Prefix").ok_or("CommonPrefixes without Prefix")?.text.clone());
    }
    if root.text_of("IsTruncated") == Some("true") {
        page.next_token = Some(
            root.text_of("NextContinuationToken")
                .ok_or("truncated listing without NextContinuationToken")?
                .to_string(),
        );
    }
    Ok(page)
}

pub(crate) fn write_list_bucket(bucket: &str, prefix: &str, page: &BucketPage) -> String {
    let mut out = String::from(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<ListBucketResult xmlns=\"http://s3.amazonaws.com/doc/2006-03-01/\">",
    );
    let _ = write!(
        out,
        "<Name>{}</Name><Prefix>{}</Prefix><KeyCount>{}</KeyCount><Delimiter>/</Delimiter>",
        escape(bucket),
        escape(prefix),
        page.objects.len() + page.common_prefixes.len()
    );
    match &page.next_token {
        Some(t) => {
            let _ = write!(
                out,
                "<IsTruncated>true</IsTruncated><NextContinuationToken>{}</NextContinuationToken>",
                escape(t.as_str())
            );
        }
        None => out.push_str("<IsTruncated>false</IsTruncated>"),
    }
    for (key, size) in &page.objects {
        let _ = write!(
            out,
            "<Contents><Key>{}</Key><Size>{size}</Size></Contents>",
            escape(key.as_str())
        );
    }
    for p in &page.common_prefixes {
        let _ = write!(
            out,
            "<CommonPrefixes><Prefix>{}</Prefix></CommonPrefixes>",
            escape(p.as_str())
        );
    }
    out.push_str("</ListBucketResult>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multistatus_round_trip() {
        let mut w = MultistatusWriter::new();
        w.resource("/data/", true, None, None);
        w.resource("/data/a%20%26b", false, Some(12), Some("Mon, 01 Jan 2024 00:00:00 GMT"));
        let parsed = parse_multistatus(&w.finish()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(parsed[0].is_collection);
        assert_eq!(parsed[1].href, "/data/a%20%26b");
        assert_eq!(parsed[1].content_length, Some(12));
        assert!(!parsed[1].is_collection);
    }

    #[test]
    fn foreign_prefixes_and_404_propstat() {
        let xml = r#"<?xml version="1.0"?>
<multistatus xmlns="DAV:" xmlns:lp1="DAV:">
 <response><href>http://h/dav/x&amp;y</href>
  <propstat><prop><lp1:resourcetype/><lp1:getcontentlength>5</lp1:getcontentlength></prop>
   <status>HTTP/1.1 200 OK</status></propstat>
  <propstat><prop><getcontentlength>999</getcontentlength></prop><status>HTTP/1.1 404 Not Found</status></propstat>
 </response>
</multistatus>"#;
        let parsed = parse_multistatus(xml).unwrap();
        assert_eq!(parsed[0].href, "http://h/dav/x&y");
        assert_eq!(parsed[0].content_length, Some(5));
    }

    #[test]
    fn list_bucket_round_trip() {
        let page = BucketPage {
            objects: vec![("a/<b>".into(), 3)],
            common_prefixes: vec!["a/c/".into()],
            next_token: Some("tok".into()),
        };
        let parsed = parse_list_bucket(&write_list_bucket("bk", "a/", &page)).unwrap();
        assert_eq!(parsed, page);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_multistatus("<html/>").is_err());
        assert!(parse_list_bucket("<ListBucketResult><Contents>").is_err());
    }
}
