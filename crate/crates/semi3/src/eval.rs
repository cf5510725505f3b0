//! Retrieval evaluation: embed the gallery and the test-split sketch
//! queries, rank by cosine distance, and report mean average precision.
//!
//! The gallery is every image in the dataset (train and test); queries are
//! the held-out sketches. The feature source switch picks whether gallery
//! vectors come from the image branch or the edgemap branch.

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Semi3Model;
use crate::tensor::{Recording, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Image,
    Edgemap,
}

impl FeatureSource {
    pub fn parse(s: &str) -> Result<FeatureSource> {
        match s {
            "image" => Ok(FeatureSource::Image),
            "edgemap" => Ok(FeatureSource::Edgemap),
            other => Err(Error::Config(format!("unknown feature source `{other}`"))),
        }
    }
}

/// Gallery of unit-norm embedding rows with their categories and ids.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub features: Vec<f64>,
    pub dim: usize,
    pub categories: Vec<usize>,
    pub ids: Vec<usize>,
    pub source: FeatureSource,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// One query's full gallery ordering, ascending distance, ties broken by
/// ascending gallery index.
#[derive(Clone, Debug)]
pub struct Ranking {
    pub query_id: usize,
    /// gallery positions, best first
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
}

const EMBED_BATCH: usize = 32;

/// Embed every gallery image (or edgemap) through the trained model.
/// Image and edgemap always travel together so the co-attention mask is
/// computed exactly as in training.
pub fn build_index(
    model: &Semi3Model,
    dataset: &Dataset,
    source: FeatureSource,
) -> Result<RetrievalIndex> {
    if dataset.samples.is_empty() {
        return Err(Error::contract("empty gallery".into()));
    }
    let dim = model.config.embed_dim;
    let mut features = Vec::with_capacity(dataset.samples.len() * dim);
    let mut categories = Vec::with_capacity(dataset.samples.len());
    let mut ids = Vec::with_capacity(dataset.samples.len());
    let indices: Vec<usize> = (0..dataset.samples.len()).collect();
    for chunk in indices.chunks(EMBED_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.samples[i].image).collect();
        let edgemaps: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.samples[i].edgemap).collect();
        let i_batch = crate::data::stack(&images)?;
        let e_batch = crate::data::stack(&edgemaps)?;
        let rec = Recording::new();
        let ((f_i, _), (f_e, _)) = model.embed_image_edgemap(&rec, &i_batch, &e_batch)?;
        let f = match source {
            FeatureSource::Image => f_i,
            FeatureSource::Edgemap => f_e,
        };
        features.extend_from_slice(f.data());
        for &i in chunk {
            categories.push(dataset.samples[i].category);
            ids.push(dataset.samples[i].id);
        }
    }
    let index = RetrievalIndex {
        features,
        dim,
        categories,
        ids,
        source,
    };
    for i in 0..index.len() {
        let norm: f64 = index.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "gallery row {i} has norm {norm}, expected unit"
            )));
        }
    }
    Ok(index)
}

/// Embed the test-split sketches; returns (embeddings, categories, ids).
pub fn embed_queries(model: &Semi3Model, dataset: &Dataset) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let test = dataset.test_indices();
    if test.is_empty() {
        return Err(Error::contract("dataset has no test split".into()));
    }
    let dim = model.config.embed_dim;
    let mut features = Vec::with_capacity(test.len() * dim);
    let mut categories = Vec::with_capacity(test.len());
    let mut ids = Vec::with_capacity(test.len());
    for chunk in test.chunks(EMBED_BATCH) {
        let sketches: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.samples[i].sketch).collect();
        let batch = crate::data::stack(&sketches)?;
        let rec = Recording::new();
        let (f_s, _) = model.embed_sketch(&rec, &batch)?;
        features.extend_from_slice(f_s.data());
        for &i in chunk {
            categories.push(dataset.samples[i].category);
            ids.push(dataset.samples[i].id);
        }
    }
    Ok((features, categories, ids))
}

/// 1 - a.b for unit vectors; lies in [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "cosine_distance dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot)
}

/// Order the whole gallery by ascending cosine distance to the query.
pub fn rank(index: &RetrievalIndex, query: &[f64], query_id: usize) -> Result<Ranking> {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(index.len());
    for i in 0..index.len() {
        scored.push((i, cosine_distance(query, index.row(i))?));
    }
    scored.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("distances are finite")
            .then(a.0.cmp(&b.0))
    });
    Ok(Ranking {
        query_id,
        order: scored.iter().map(|&(i, _)| i).collect(),
        distances: scored.iter().map(|&(_, d)| d).collect(),
    })
}

/// MAP over full-gallery rankings. AP of one query is the mean, over its
/// relevant gallery items, of precision at that item's rank; relevance is
/// category equality. Queries whose category is absent from the gallery
/// score 0 and produce a warning.
pub fn mean_average_precision(
    rankings: &[Ranking],
    query_categories: &[usize],
    gallery_categories: &[usize],
) -> Result<(f64, Vec<String>)> {
    if rankings.len() != query_categories.len() {
        return Err(Error::contract(format!(
            "{} rankings but {} query categories",
            rankings.len(),
            query_categories.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::contract("MAP over zero queries".into()));
    }
    let mut warnings = Vec::new();
    let mut ap_sum = 0.0;
    for (ranking, &qcat) in rankings.iter().zip(query_categories) {
        if ranking.order.len() != gallery_categories.len() {
            return Err(Error::contract(format!(
                "ranking for query {} covers {} items, gallery has {}",
                ranking.query_id,
                ranking.order.len(),
                gallery_categories.len()
            )));
        }
        let relevant_total = gallery_categories.iter().filter(|&&c| c == qcat).count();
        if relevant_total == 0 {
            warnings.push(format!(
                "query {} category {qcat} absent from gallery; AP = 0",
                ranking.query_id
            ));
            continue;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &gal) in ranking.order.iter().enumerate() {
            if gallery_categories[gal] == qcat {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        ap_sum += precision_sum / relevant_total as f64;
    }
    Ok((ap_sum / rankings.len() as f64, warnings))
}

/// The whole test protocol: embed gallery and queries, rank, average.
pub fn evaluate(model: &Semi3Model, dataset: &Dataset, source: FeatureSource) -> Result<f64> {
    let index = build_index(model, dataset, source)?;
    let (queries, query_categories, query_ids) = embed_queries(model, dataset)?;
    let dim = model.config.embed_dim;
    let mut rankings = Vec::with_capacity(query_ids.len());
    for (qi, &qid) in query_ids.iter().enumerate() {
        rankings.push(rank(&index, &queries[qi * dim..(qi + 1) * dim], qid)?);
    }
    let (map, _warnings) = mean_average_precision(&rankings, &query_categories, &index.categories)?;
    Ok(map)
}

/// Rank the gallery against one sketch query drawn from the dataset by id.
pub fn retrieve_by_id(
    model: &Semi3Model,
    dataset: &Dataset,
    query_id: usize,
    source: FeatureSource,
) -> Result<(Ranking, RetrievalIndex)> {
    let sample = dataset
        .by_id(query_id)
        .ok_or_else(|| Error::contract(format!("no sample with id {query_id}")))?;
    let index = build_index(model, dataset, source)?;
    let rec = Recording::new();
    let batch = crate::data::stack(&[&sample.sketch])?;
    let (f_s, _) = model.embed_sketch(&rec, &batch)?;
    let ranking = rank(&index, f_s.data(), query_id)?;
    Ok((ranking, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_from_rows(rows: Vec<Vec<f64>>, categories: Vec<usize>) -> RetrievalIndex {
        let dim = rows[0].len();
        let features = rows.into_iter().flatten().collect();
        let ids = (0..categories.len()).collect();
        RetrievalIndex {
            features,
            dim,
            categories,
            ids,
            source: FeatureSource::Image,
        }
    }

    #[test]
    fn cosine_distance_basics() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn query_vector_in_gallery_ranks_first() {
        let q = vec![0.6, 0.8];
        let index = index_from_rows(
            vec![vec![0.0, 1.0], vec![0.6, 0.8], vec![1.0, 0.0]],
            vec![0, 1, 2],
        );
        let r = rank(&index, &q, 0).unwrap();
        assert_eq!(r.order[0], 1);
        assert!(r.distances.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn identical_vectors_tie_break_by_gallery_index() {
        let v = vec![1.0, 0.0];
        let index = index_from_rows(vec![v.clone(), v.clone(), v.clone()], vec![0, 1, 2]);
        let r = rank(&index, &v, 0).unwrap();
        assert_eq!(r.order, vec![0, 1, 2]);
    }

    #[test]
    fn map_single_relevant_at_rank_one() {
        let index_cats = vec![0, 1, 1];
        let r = Ranking {
            query_id: 0,
            order: vec![0, 1, 2],
            distances: vec![0.0, 0.5, 0.6],
        };
        let (map, warnings) = mean_average_precision(&[r], &[0], &index_cats).unwrap();
        assert_eq!(map, 1.0);
        assert!(warnings.is_empty());
    }

    #[test]
    fn map_relevant_at_ranks_one_and_three() {
        // AP = (1/1 + 2/3) / 2 = 0.8333...
        let index_cats = vec![0, 1, 0];
        let r = Ranking {
            query_id: 0,
            order: vec![0, 1, 2],
            distances: vec![0.1, 0.2, 0.3],
        };
        let (map, _) = mean_average_precision(&[r], &[0], &index_cats).unwrap();
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12, "{map}");
    }

    #[test]
    fn map_no_relevant_items_is_zero_with_warning() {
        let index_cats = vec![1, 1];
        let r = Ranking {
            query_id: 7,
            order: vec![0, 1],
            distances: vec![0.1, 0.2],
        };
        let (map, warnings) = mean_average_precision(&[r], &[0], &index_cats).unwrap();
        assert_eq!(map, 0.0);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("query 7"));
    }

    #[test]
    fn map_is_invariant_under_gallery_permutation() {
        // permute gallery storage; with the deterministic tie rule the AP
        // values must not change
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.8, 0.6],
            vec![0.0, 1.0],
            vec![0.6, 0.8],
        ];
        let cats = vec![0, 1, 0, 1];
        let q = vec![1.0, 0.0];

        let index = index_from_rows(rows.clone(), cats.clone());
        let r = rank(&index, &q, 0).unwrap();
        let (map_a, _) = mean_average_precision(&[r], &[0], &index.categories).unwrap();

        let perm = [2usize, 0, 3, 1];
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let cats_p: Vec<usize> = perm.iter().map(|&i| cats[i]).collect();
        let index_p = index_from_rows(rows_p, cats_p);
        let r_p = rank(&index_p, &q, 0).unwrap();
        let (map_b, _) = mean_average_precision(&[r_p], &[0], &index_p.categories).unwrap();

        assert!((map_a - map_b).abs() < 1e-15);
    }
}
